"""Report emission: summary.json, sorted cosine curves (CSV + SVG figure),
and PPM image dumps.

summary.json schema (all floats fixed to 6 decimals, keys sorted, inf/nan
written as strings so identical inputs give byte-identical files):
  notes   : metric caveats (PSNR/SSIM substituting for LPIPS)
  configs : name -> {anchors, label_recovery_rate, mean_cosine,
            median_cosine, mean_best_cosine, mean_psnr_adv, mean_psnr_clean,
            mean_ssim_adv, mean_ssim_clean, mean_final_objective}

curves.csv columns: config,anchor_rank,cosine - best-of-batches restoration
cosine per anchor, sorted non-increasing within each config.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "gradleak"

METRIC_NOTE = ("Reconstruction quality is reported as PSNR/SSIM; LPIPS is not used "
               "because it requires a pretrained perceptual network.")


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)


def write_ppm(path, image: np.ndarray):
    """Write a (C,H,W) or (H,W) float image in [0,1] as binary PPM (P6)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"write_ppm: expected 1 or 3 channels, got shape {arr.shape}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    h, w = arr.shape[1], arr.shape[2]
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) float32 array in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / maxval)


def side_by_side(left: np.ndarray, right: np.ndarray, gap: int = 2) -> np.ndarray:
    """Compose two (C,H,W) images horizontally with a gray separator."""
    a = np.atleast_3d(np.asarray(left, dtype=np.float32))
    b = np.atleast_3d(np.asarray(right, dtype=np.float32))
    if a.shape != b.shape:
        raise ValueError(f"side_by_side: shapes {a.shape} and {b.shape} differ")
    sep = np.full((a.shape[0], a.shape[1], gap), 0.5, dtype=np.float32)
    return np.concatenate([a, sep, b], axis=2)


# ---------------------------------------------------------------------------
# fixed-precision JSON


def _json_fixed(value, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = []
        for key in sorted(value):
            items.append(f'{pad}  "{key}": {_json_fixed(value[key], indent + 1)}')
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [f"{pad}  {_json_fixed(v, indent + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if isinstance(value, bool) or value is None:
        return {True: "true", False: "false", None: "null"}[value]
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isinf(v):
            return '"inf"' if v > 0 else '"-inf"'
        if math.isnan(v):
            return '"nan"'
        return f"{v:.6f}"
    if isinstance(value, str):
        import json

        return json.dumps(value)
    raise TypeError(f"cannot serialize {type(value)} into the report")


def dump_fixed_json(obj, path):
    text = _json_fixed(obj) + "\n"
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


# ---------------------------------------------------------------------------
# result structures


@dataclass
class AnchorMetrics:
    anchor_id: int
    per_batch_cosine: list[float]
    best_cosine: float  # best over the anchor's batches (evaluation-side max)
    psnr_adv: float | None = None  # reconstruction vs the adversarial target
    psnr_clean: float | None = None  # reconstruction vs the clean anchor
    ssim_adv: float | None = None
    ssim_clean: float | None = None
    final_objective: float | None = None
    recon_image: np.ndarray | None = None
    target_image: np.ndarray | None = None


@dataclass
class RunResults:
    config_name: str
    anchors: list[AnchorMetrics]
    label_recovery_rate: float | None = None
    extras: dict = field(default_factory=dict)


def _clean_mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    if any(math.isinf(v) for v in vals):
        return float("inf")
    return float(np.mean(vals))


def emit_report(results: list[RunResults], out_dir) -> dict:
    """Write summary.json, curves.csv, curves.svg, and anchor image pairs.

    Returns the summary dict. Output is deterministic: fixed float precision,
    sorted keys, salted SVG ids, no timestamps.
    """
    if not results:
        raise ValueError("emit_report: no results")
    os.makedirs(out_dir, exist_ok=True)

    summary: dict = {"notes": METRIC_NOTE, "configs": {}}
    for run in results:
        cosines = [a.best_cosine for a in run.anchors]
        summary["configs"][run.config_name] = {
            "anchors": len(run.anchors),
            "label_recovery_rate": run.label_recovery_rate,
            "mean_cosine": _clean_mean([c for a in run.anchors for c in a.per_batch_cosine]),
            "median_cosine": float(np.median(cosines)) if cosines else None,
            "mean_best_cosine": _clean_mean(cosines),
            "mean_psnr_adv": _clean_mean([a.psnr_adv for a in run.anchors]),
            "mean_psnr_clean": _clean_mean([a.psnr_clean for a in run.anchors]),
            "mean_ssim_adv": _clean_mean([a.ssim_adv for a in run.anchors]),
            "mean_ssim_clean": _clean_mean([a.ssim_clean for a in run.anchors]),
            "mean_final_objective": _clean_mean([a.final_objective for a in run.anchors]),
            **run.extras,
        }
    dump_fixed_json(summary, os.path.join(out_dir, "summary.json"))

    with open(os.path.join(out_dir, "curves.csv"), "w", encoding="utf-8") as f:
        f.write("config,anchor_rank,cosine\n")
        for run in results:
            for rank, value in enumerate(sorted((a.best_cosine for a in run.anchors), reverse=True), 1):
                f.write(f"{run.config_name},{rank},{value:.6f}\n")

    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for run in results:
        ys = sorted((a.best_cosine for a in run.anchors), reverse=True)
        ax.plot(range(1, len(ys) + 1), ys, label=run.config_name)
    ax.set_xlabel("anchor rank")
    ax.set_ylabel("restoration cosine")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(loc="lower left", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "curves.svg"), format="svg", metadata={"Date": None})
    plt.close(fig)

    pair_dir = os.path.join(out_dir, "anchors")
    for run in results:
        for a in run.anchors:
            if a.recon_image is None or a.target_image is None:
                continue
            os.makedirs(pair_dir, exist_ok=True)
            pair = side_by_side(a.recon_image, a.target_image)
            write_ppm(os.path.join(pair_dir, f"{run.config_name}_anchor{a.anchor_id:04d}.ppm"), pair)
    return summary
