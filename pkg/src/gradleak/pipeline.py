"""Pipeline stages behind the CLI: dataset preparation, training, FL capture,
attack, evaluation, and sweeps over a config grid.

Stages communicate only through files under the run directory, each writes a
manifest with config and artifact hashes, and all randomness derives from
the master seed, so any stage can be deleted and re-run bit-identically.

Run directory layout:
  dataset/train.glds test.glds
  train/model.ckpt history.csv
  capture/anchors.json anchor_AAA/batch_BB.packet + .groundtruth
  attack/anchor_AAA/batch_BB/result.json recon_LLL.ppm trace_LLL.csv
  attack/best.json timing.json
  report/summary.json curves.csv curves.svg anchors/*.ppm
  manifests/<stage>.json
"""

from __future__ import annotations

import csv
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .attack import (AttackSettings, BaselineSettings, baseline_gradient_matching, restore_features,
                     run_attack)
from .config import config_hash, derive_seed, validate_config, write_json_atomic, write_manifest
from .container import sha256_file
from .data import BatchSpec, Dataset, generate_synthetic, load_cifar_binary, load_dataset, load_idx, \
    sample_batch, save_dataset
from .flsim import client_local_step, deserialize_packet, load_groundtruth, save_groundtruth, \
    serialize_packet
from .metrics import cosine_similarity, psnr, ssim
from .models import ModelSpec, build_model, load_checkpoint, save_checkpoint
from .report import AnchorMetrics, RunResults, dump_fixed_json, emit_report, read_ppm, write_ppm
from .training import ATConfig, TrainConfig, train, write_history_csv

log = logging.getLogger("gradleak")


class MissingArtifactError(FileNotFoundError):
    pass


def _require(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing upstream artifact: {path}")
    return path


def _paths(out: str) -> dict:
    return {
        "train_ds": os.path.join(out, "dataset", "train.glds"),
        "test_ds": os.path.join(out, "dataset", "test.glds"),
        "checkpoint": os.path.join(out, "train", "model.ckpt"),
        "history": os.path.join(out, "train", "history.csv"),
        "capture": os.path.join(out, "capture"),
        "anchors": os.path.join(out, "capture", "anchors.json"),
        "attack": os.path.join(out, "attack"),
        "report": os.path.join(out, "report"),
    }


def _atcfg(cfg) -> ATConfig | None:
    at = cfg["train"]["at"]
    return ATConfig(**at) if at else None


# ---------------------------------------------------------------------------


def stage_dataset(cfg: dict) -> dict:
    out = cfg["out"]
    p = _paths(out)
    os.makedirs(os.path.dirname(p["train_ds"]), exist_ok=True)
    d = cfg["dataset"]
    master = cfg["seed"]
    inputs: dict[str, str] = {}
    if d["kind"] == "synthetic":
        train_ds = generate_synthetic(d["classes"], d["per_class_train"], size=d["image_size"],
                                      seed=derive_seed(master, "dataset", 0), channels=d["channels"],
                                      noise=d["noise"], name=f"{cfg['name']}-train")
        test_ds = generate_synthetic(d["classes"], d["per_class_test"], size=d["image_size"],
                                     seed=derive_seed(master, "dataset", 1), channels=d["channels"],
                                     noise=d["noise"], name=f"{cfg['name']}-test")
    elif d["kind"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            _require(d[key])
            inputs[d[key]] = sha256_file(d[key])
        train_ds = load_idx(d["train_images"], d["train_labels"], name=f"{cfg['name']}-train")
        test_ds = load_idx(d["test_images"], d["test_labels"], name=f"{cfg['name']}-test")
    else:  # cifar
        for key in ("train_files", "test_files"):
            for path in d[key] or []:
                _require(path)
                inputs[path] = sha256_file(path)
        train_ds = load_cifar_binary(d["train_files"], name=f"{cfg['name']}-train")
        test_ds = load_cifar_binary(d["test_files"], name=f"{cfg['name']}-test")
    save_dataset(train_ds, p["train_ds"])
    save_dataset(test_ds, p["test_ds"])
    log.info("dataset: %d train / %d test images, %d classes",
             len(train_ds), len(test_ds), train_ds.num_classes)
    outputs = {p["train_ds"]: sha256_file(p["train_ds"]), p["test_ds"]: sha256_file(p["test_ds"])}
    write_manifest(out, "dataset", cfg, inputs, outputs)
    return outputs


def stage_train(cfg: dict) -> dict:
    out = cfg["out"]
    p = _paths(out)
    train_ds = load_dataset(_require(p["train_ds"]))
    test_ds = load_dataset(_require(p["test_ds"]))
    master = cfg["seed"]

    spec = ModelSpec(arch=cfg["model"]["arch"], input_shape=train_ds.image_shape,
                     feature_dim=cfg["model"]["feature_dim"], num_classes=train_ds.num_classes,
                     head_bias=cfg["model"]["head_bias"])
    model = build_model(spec, seed=derive_seed(master, "model-init"))
    tc = TrainConfig(epochs=cfg["train"]["epochs"], batch_size=cfg["train"]["batch_size"],
                     optimizer=cfg["train"]["optimizer"], at=_atcfg(cfg),
                     seed=derive_seed(master, "train"), robust_eval=cfg["train"]["robust_eval"])
    history = train(model, train_ds, tc, test_dataset=test_ds)
    if history:
        last = history[-1]
        log.info("train: final train_acc=%.3f test_acc=%s", last["train_acc"], last["test_acc"])

    os.makedirs(os.path.dirname(p["checkpoint"]), exist_ok=True)
    save_checkpoint(model, p["checkpoint"])
    write_history_csv(history, p["history"])
    inputs = {p["train_ds"]: sha256_file(p["train_ds"]), p["test_ds"]: sha256_file(p["test_ds"])}
    outputs = {p["checkpoint"]: sha256_file(p["checkpoint"]), p["history"]: sha256_file(p["history"])}
    write_manifest(out, "train", cfg, inputs, outputs)
    return outputs


def stage_capture(cfg: dict) -> dict:
    out = cfg["out"]
    p = _paths(out)
    model = load_checkpoint(_require(p["checkpoint"]))
    ckpt_hash = sha256_file(p["checkpoint"])
    train_ds = load_dataset(_require(p["train_ds"]))
    master = cfg["seed"]
    cap = cfg["capture"]
    at = _atcfg(cfg)

    rng = np.random.Generator(np.random.PCG64(derive_seed(master, "anchors")))
    anchor_indices = rng.choice(len(train_ds), size=cap["anchors"], replace=False)
    anchors = [{"id": a, "index": int(idx), "label": int(train_ds.labels[idx])}
               for a, idx in enumerate(anchor_indices)]
    os.makedirs(p["capture"], exist_ok=True)
    write_json_atomic({"anchors": anchors, "batch_size": cap["batch_size"],
                       "batches_per_anchor": cap["batches_per_anchor"],
                       "at_mode": at is not None and at.epsilon > 0}, p["anchors"])

    outputs = {p["anchors"]: sha256_file(p["anchors"])}
    for anchor in anchors:
        a = anchor["id"]
        adir = os.path.join(p["capture"], f"anchor_{a:03d}")
        os.makedirs(adir, exist_ok=True)
        for b in range(cap["batches_per_anchor"]):
            spec = BatchSpec(batch_size=cap["batch_size"], anchor=anchor["index"],
                             distinct_labels=cap["distinct_labels"],
                             seed=derive_seed(master, f"capture/{a}", b))
            images, labels, idx = sample_batch(train_ds, spec)
            packet, record = client_local_step(
                model, images, labels, at=at, seed=derive_seed(master, f"pgd/{a}", b),
                checkpoint_path=p["checkpoint"], checkpoint_hash=ckpt_hash,
                round_id=b, client_id=a, disclose_batch_size=cap["disclose_batch_size"],
                allow_duplicate_labels=not cap["distinct_labels"], dataset_indices=idx)
            packet_path = os.path.join(adir, f"batch_{b:02d}.packet")
            serialize_packet(packet, packet_path)
            save_groundtruth(record, os.path.join(adir, f"batch_{b:02d}.groundtruth"))
            outputs[packet_path] = sha256_file(packet_path)
        log.info("capture: anchor %d/%d done", a + 1, len(anchors))
    inputs = {p["checkpoint"]: ckpt_hash, p["train_ds"]: sha256_file(p["train_ds"])}
    write_manifest(out, "capture", cfg, inputs, outputs)
    return outputs


def _load_anchors(p) -> dict:
    import json

    with open(_require(p["anchors"]), "r", encoding="utf-8") as f:
        return json.load(f)


def stage_attack(cfg: dict) -> dict:
    out = cfg["out"]
    p = _paths(out)
    model = load_checkpoint(_require(p["checkpoint"]))
    meta = _load_anchors(p)
    master = cfg["seed"]
    acfg = cfg["attack"]
    settings = AttackSettings(steps=acfg["steps"], lr=acfg["lr"], tv_weight=acfg["tv_weight"],
                              restarts=acfg["restarts"], seed=derive_seed(master, "attack"),
                              invert=acfg["invert"])

    anchor_packets = {}
    anchor_labels = {}
    for anchor in meta["anchors"]:
        a = anchor["id"]
        anchor_labels[a] = anchor["label"]
        packets = []
        for b in range(meta["batches_per_anchor"]):
            packets.append(deserialize_packet(
                _require(os.path.join(p["capture"], f"anchor_{a:03d}", f"batch_{b:02d}.packet"))))
        anchor_packets[a] = packets

    attacks = run_attack(model, anchor_packets, settings, anchor_labels=anchor_labels)

    timing = {}
    best = {}
    outputs = {}
    for anchor_attack in attacks:
        a = anchor_attack.anchor_id
        best[str(a)] = anchor_attack.best_by_objective
        for b, result in enumerate(anchor_attack.results):
            bdir = os.path.join(p["attack"], f"anchor_{a:03d}", f"batch_{b:02d}")
            os.makedirs(bdir, exist_ok=True)
            timing[f"anchor_{a:03d}/batch_{b:02d}"] = result.wall_clock
            result_json = {
                "labels": result.labels,
                "negative_columns": result.diagnostics["negative_columns"],
                "estimated_batch_size": result.diagnostics["estimated_batch_size"],
                "objectives": {str(k): v for k, v in result.objectives.items()},
                "restart_objectives": {str(k): v for k, v in result.restart_objectives.items()},
                "warnings": result.warnings,
            }
            rj_path = os.path.join(bdir, "result.json")
            dump_fixed_json(result_json, rj_path)
            outputs[rj_path] = sha256_file(rj_path)
            for label, image in result.reconstructions.items():
                ppm_path = os.path.join(bdir, f"recon_{label:03d}.ppm")
                write_ppm(ppm_path, image)
                outputs[ppm_path] = sha256_file(ppm_path)
                with open(os.path.join(bdir, f"trace_{label:03d}.csv"), "w", newline="") as f:
                    writer = csv.writer(f)
                    writer.writerow(["step", "objective"])
                    for step, value in result.traces[label]:
                        writer.writerow([step, f"{value:.8f}"])
            if acfg["baseline"]:
                packet = anchor_packets[a][b]
                bl = BaselineSettings(steps=acfg["baseline_steps"] or acfg["steps"], lr=acfg["lr"],
                                      tv_weight=acfg["tv_weight"], restarts=acfg["baseline_restarts"],
                                      seed=derive_seed(master, f"baseline/{a}", b))
                images, bl_trace = baseline_gradient_matching(model, packet, result.labels, bl)
                for slot, label in enumerate(result.labels):
                    write_ppm(os.path.join(bdir, f"baseline_{label:03d}.ppm"), images[slot])
                with open(os.path.join(bdir, "baseline_trace.csv"), "w", newline="") as f:
                    writer = csv.writer(f)
                    writer.writerow(["step", "objective"])
                    for step, value in bl_trace:
                        writer.writerow([step, f"{value:.8f}"])
        log.info("attack: anchor %d/%d done", a + 1, len(attacks))

    os.makedirs(p["attack"], exist_ok=True)
    dump_fixed_json(best, os.path.join(p["attack"], "best.json"))
    write_json_atomic(timing, os.path.join(p["attack"], "timing.json"))  # wall clock, not hashed
    inputs = {p["checkpoint"]: sha256_file(p["checkpoint"]), p["anchors"]: sha256_file(p["anchors"])}
    write_manifest(out, "attack", cfg, inputs, outputs)
    return outputs


def stage_evaluate(cfg: dict) -> dict:
    out = cfg["out"]
    p = _paths(out)
    meta = _load_anchors(p)
    channels = None
    anchors_metrics = []
    recoveries = []
    for anchor in meta["anchors"]:
        a = anchor["id"]
        y_anchor = anchor["label"]
        per_batch_cos = []
        candidates = []  # (objective, batch, recon_path)
        for b in range(meta["batches_per_anchor"]):
            adir = os.path.join(p["capture"], f"anchor_{a:03d}")
            packet = deserialize_packet(_require(os.path.join(adir, f"batch_{b:02d}.packet")))
            record = load_groundtruth(_require(os.path.join(adir, f"batch_{b:02d}.groundtruth")))
            channels = record.clean_images.shape[1]

            restored = restore_features(packet.head_gradient(), [y_anchor])[0]
            per_batch_cos.append(cosine_similarity(restored.vector, record.features[0]))

            bdir = os.path.join(p["attack"], f"anchor_{a:03d}", f"batch_{b:02d}")
            rj_path = os.path.join(bdir, "result.json")
            if os.path.exists(rj_path):
                import json

                with open(rj_path, "r", encoding="utf-8") as f:
                    result = json.load(f)
                recoveries.append(set(result["labels"]) == set(int(v) for v in record.labels))
                obj = result["objectives"].get(str(y_anchor))
                recon_path = os.path.join(bdir, f"recon_{y_anchor:03d}.ppm")
                if obj is not None and os.path.exists(recon_path):
                    candidates.append((float(obj), b, recon_path, record))

        metrics = AnchorMetrics(anchor_id=a, per_batch_cosine=per_batch_cos,
                                best_cosine=max(per_batch_cos))
        if candidates:
            obj, b, recon_path, record = min(candidates)
            recon = read_ppm(recon_path)
            if channels == 1:
                recon = recon[:1]
            adv = record.adv_images[0]
            clean = record.clean_images[0]
            metrics.final_objective = obj
            metrics.psnr_adv = psnr(recon, adv)
            metrics.psnr_clean = psnr(recon, clean)
            metrics.ssim_adv = ssim(recon, adv)
            metrics.ssim_clean = ssim(recon, clean)
            metrics.recon_image = recon
            metrics.target_image = adv
        anchors_metrics.append(metrics)

    run = RunResults(config_name=cfg["name"], anchors=anchors_metrics,
                     label_recovery_rate=float(np.mean(recoveries)) if recoveries else None)
    summary = emit_report([run], p["report"])
    log.info("evaluate: mean best cosine %.4f",
             summary["configs"][cfg["name"]]["mean_best_cosine"] or float("nan"))
    report_files = [os.path.join(p["report"], name) for name in ("summary.json", "curves.csv", "curves.svg")]
    outputs = {path: sha256_file(path) for path in report_files}
    inputs = {p["anchors"]: sha256_file(p["anchors"])}
    write_manifest(out, "evaluate", cfg, inputs, outputs)
    return outputs


ALL_STAGES = {
    "dataset": stage_dataset,
    "train": stage_train,
    "capture": stage_capture,
    "attack": stage_attack,
    "evaluate": stage_evaluate,
}


def run_all(cfg: dict):
    for stage in ("dataset", "train", "capture", "attack", "evaluate"):
        ALL_STAGES[stage](cfg)


# ---------------------------------------------------------------------------
# sweeps


def _cell_name(assignment: list[tuple[str, object]]) -> str:
    parts = []
    for dotted, value in assignment:
        short = dotted.split(".")[-1]
        parts.append(f"{short}={value}")
    return "-".join(parts)


def expand_grid(base: dict, grid: dict[str, list]) -> list[tuple[str, dict]]:
    """Cartesian product of grid values over the base config; each cell gets
    its own name and output directory."""
    from .config import set_by_path

    keys = sorted(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        assignment = list(zip(keys, combo))
        name = _cell_name(assignment)
        cell = validate_config(base)
        for dotted, value in assignment:
            set_by_path(cell, dotted, value)
        cell["name"] = name
        cell["out"] = os.path.join(base.get("out", "runs/sweep"), "cells", name)
        cells.append((name, cell))
    return cells


def _run_cell(cell: dict) -> str:
    run_all(cell)
    return cell["name"]


def run_sweep(sweep_cfg: dict, jobs: int = 1):
    """Run every grid cell end to end, then aggregate cell reports."""
    if "base" not in sweep_cfg or "grid" not in sweep_cfg:
        raise ValueError("sweep config needs 'base' and 'grid' keys")
    base = dict(sweep_cfg["base"])
    out = base.get("out", "runs/sweep")
    cells = expand_grid(base, sweep_cfg["grid"])
    log.info("sweep: %d cells -> %s", len(cells), out)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_cell, [cfg for _, cfg in cells]))
    else:
        for _, cfg in cells:
            _run_cell(cfg)

    # combined report over cells
    import json

    report_dir = os.path.join(out, "report")
    os.makedirs(report_dir, exist_ok=True)
    combined = {"cells": {}}
    curve_rows = []
    for name, cfg in cells:
        with open(os.path.join(cfg["out"], "report", "summary.json"), "r", encoding="utf-8") as f:
            cell_summary = json.load(f)
        combined["cells"][name] = cell_summary["configs"][name]
        with open(os.path.join(cfg["out"], "report", "curves.csv"), "r", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            for row in reader:
                curve_rows.append((name, int(row["anchor_rank"]), float(row["cosine"])))
    dump_fixed_json(combined, os.path.join(report_dir, "summary.json"))
    with open(os.path.join(report_dir, "curves.csv"), "w", encoding="utf-8") as f:
        f.write("config,anchor_rank,cosine\n")
        for name, rank, value in curve_rows:
            f.write(f"{name},{rank},{value:.6f}\n")

    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for name, _ in cells:
        ys = [v for n, _, v in curve_rows if n == name]
        ax.plot(range(1, len(ys) + 1), ys, label=name)
    ax.set_xlabel("anchor rank")
    ax.set_ylabel("restoration cosine")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(loc="lower left", fontsize=7)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(os.path.join(report_dir, "curves.svg"), format="svg", metadata={"Date": None})
    plt.close(fig)
    return [name for name, _ in cells]
