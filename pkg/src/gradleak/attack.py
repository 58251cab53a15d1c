"""The two-step gradient-leakage attack plus the direct gradient-matching
baseline.

Step one reads per-sample penultimate features straight out of the linear
head's weight-gradient columns: the column for an appeared label y is, up to
a negative scale, dominated by that sample's feature vector, and only
columns of appeared labels can contain negative entries (features are
non-negative under ReLU). Step two reconstructs an image by driving its
feature toward the restored one under a scale-invariant cosine objective
with a total-variation prior.

Sign convention: the restored vector is the NEGATED gradient column, so a
perfect restoration has cosine +1 against the true feature.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .flsim import GradientPacket
from .models import Model, forward_trace
from .optim import Adam
from .tensor import Graph, Tensor, ZeroVectorError


class ZeroFeatureError(RuntimeError):
    """Every restart produced a zero feature vector; cosine is undefined."""


# ---------------------------------------------------------------------------
# step 1: labels and features from the head gradient


def analytic_head_gradient(probs: np.ndarray, features: np.ndarray, labels) -> np.ndarray:
    """Closed-form batch-averaged gradient of the head weight (D, K).

    Column k is the mean over samples of (p_ik - [k == y_i]) * r_i; this is
    what autodiff produces for the mean cross-entropy through a bias-free
    linear head.
    """
    p = np.asarray(probs)
    r = np.asarray(features)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or r.ndim != 2 or p.shape[0] != r.shape[0] or y.shape != (p.shape[0],):
        raise T.ShapeError(f"analytic_head_gradient: probs {p.shape}, features {r.shape}, "
                           f"labels {y.shape} are inconsistent")
    coeff = p.copy()
    coeff[np.arange(len(y)), y] -= 1.0
    return r.T @ coeff / len(y)


def recover_labels(head_grad: np.ndarray, batch_size: int) -> tuple[list[int], dict]:
    """Batch labels = indices of the batch_size columns with the smallest
    minimum entry (ascending, ties to the lower class index).

    Only columns of labels present in the batch can have negative minima, so
    the count of negative-minimum columns doubles as an estimate of N.
    """
    g = np.asarray(head_grad)
    if g.ndim != 2:
        raise T.ShapeError(f"recover_labels: head gradient must be (D, K), got {g.shape}")
    k = g.shape[1]
    if batch_size > k:
        raise ValueError(f"recover_labels: batch size {batch_size} exceeds {k} classes")
    minima = g.min(axis=0)
    order = np.lexsort((np.arange(k), minima))
    labels = [int(c) for c in order[:batch_size]]
    negative = int((minima < 0).sum())
    diagnostics = {
        "column_minima": minima,
        "negative_columns": negative,
        "estimated_batch_size": negative,
    }
    return labels, diagnostics


@dataclass
class RestoredFeature:
    """A feature vector read out of one head-gradient column.

    The true scale factor (1 - p_y) is invisible to the attacker, so
    scale_estimate stays None and downstream matching is scale-invariant.
    """

    label: int
    vector: np.ndarray  # negated gradient column
    raw_column: np.ndarray
    scale_estimate: float | None = None


def restore_features(head_grad: np.ndarray, labels) -> list[RestoredFeature]:
    """One restored feature per label: the negated head-gradient column.
    No normalization is applied."""
    g = np.asarray(head_grad)
    out = []
    for y in labels:
        col = g[:, int(y)].copy()
        out.append(RestoredFeature(label=int(y), vector=-col, raw_column=col))
    return out


# ---------------------------------------------------------------------------
# step 2: image from feature


@dataclass
class ReconstructionTask:
    target: RestoredFeature
    image_shape: tuple  # (C, H, W)
    steps: int = 5000
    lr: float = 0.1
    tv_weight: float = 1e-6
    restarts: int = 5
    seed: int = 0
    init_image: np.ndarray | None = None  # overrides random init (diagnostics)

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class InversionResult:
    image: np.ndarray  # (C, H, W) in [0, 1]
    objective: float  # final objective of the best restart
    restart_objectives: list[float]
    trace: list[tuple[int, float]]  # (step, objective) every 100 steps, best restart
    warnings: list[str] = field(default_factory=list)


def _feature_fn(model) -> object:
    return model.features if isinstance(model, Model) else model


def _objective_value(feature_fn, z: np.ndarray, target: np.ndarray, tv_weight: float) -> float:
    zt = Tensor(z)
    obj = T.cosine_distance(feature_fn(zt), target)
    val = float(obj.data)
    if tv_weight > 0:
        val += tv_weight * float(T.total_variation(zt).data)
    return val


def invert_feature(model, task: ReconstructionTask) -> InversionResult:
    """Minimize cosine_distance(features(z), restored) + tv_weight * TV(z)
    with Adam, clipping z to [0, 1] after every step; best restart wins by
    final objective value."""
    feature_fn = _feature_fn(model)
    target = np.asarray(task.target.vector, dtype=np.float64).reshape(-1)
    if np.linalg.norm(target) == 0:
        raise ZeroVectorError("invert_feature: restored feature is the zero vector")

    best: tuple[float, np.ndarray, list] | None = None
    restart_objectives: list[float] = []
    warnings: list[str] = []
    params = model.params if isinstance(model, Model) else {}
    with T.frozen(params):  # only the image is being optimized
        for restart in range(task.restarts):
            rng = np.random.Generator(np.random.PCG64([task.seed, restart]))
            if task.init_image is not None:
                z = np.asarray(task.init_image, dtype=np.float32).reshape((1, *task.image_shape)).copy()
            else:
                z = rng.uniform(0.0, 1.0, size=(1, *task.image_shape)).astype(np.float32)
            zt = Tensor(z, requires_grad=True)
            opt = Adam({"z": zt}, lr=task.lr)
            trace: list[tuple[int, float]] = []
            failed = False
            for step in range(task.steps):
                try:
                    with Graph() as g:
                        obj = T.cosine_distance(feature_fn(zt), target)
                        if task.tv_weight > 0:
                            obj = T.add(obj, T.scale(T.total_variation(zt), task.tv_weight))
                        g.backward(obj)
                except ZeroVectorError:
                    warnings.append(f"restart {restart}: zero feature vector at step {step}, abandoned")
                    failed = True
                    break
                if step % 100 == 0:
                    trace.append((step, float(obj.data)))
                opt.step()
                np.clip(zt.data, 0.0, 1.0, out=zt.data)
            if failed:
                restart_objectives.append(float("inf"))
                continue
            try:
                final = _objective_value(feature_fn, zt.data, target, task.tv_weight)
            except ZeroVectorError:
                warnings.append(f"restart {restart}: zero feature vector at the final point, abandoned")
                restart_objectives.append(float("inf"))
                continue
            trace.append((task.steps, final))
            restart_objectives.append(final)
            if best is None or final < best[0]:
                best = (final, zt.data[0].copy(), trace)
    if best is None:
        raise ZeroFeatureError(f"invert_feature: all {task.restarts} restarts hit a zero feature vector")
    return InversionResult(image=best[1], objective=best[0], restart_objectives=restart_objectives,
                           trace=best[2], warnings=warnings)


# ---------------------------------------------------------------------------
# baseline: direct gradient matching over all parameters


@dataclass
class BaselineSettings:
    steps: int = 5000
    lr: float = 0.1
    tv_weight: float = 1e-6
    restarts: int = 1
    seed: int = 0


def _concat(grads: dict[str, np.ndarray], names) -> np.ndarray:
    return np.concatenate([np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in names])


def _param_grads_and_input_grad(model64: Model, z: np.ndarray, labels: np.ndarray,
                                need_param_grads: bool = True):
    model64.zero_grad()
    ctx = T.frozen(model64.params) if not need_param_grads else _noop()
    with ctx:
        with Graph() as g:
            zt = Tensor(z, requires_grad=True, dtype=np.float64)
            trace = forward_trace(model64, zt, labels)
            g.backward(trace.loss)
    grads = {name: p.grad for name, p in model64.params.items()}
    return grads, zt.grad


class _noop:
    def __enter__(self):
        return self

    def __exit__(self, *args):
        return False


def baseline_matching_gradient(model64: Model, z: np.ndarray, labels: np.ndarray,
                               target_vec: np.ndarray, names: list[str]) -> tuple[float, np.ndarray]:
    """Value and d/dz of 1 - cos(gradients(z), target).

    The z-gradient is the vector-Jacobian product of the parameter-gradient
    map, evaluated by a symmetric difference of input gradients under a
    parameter-space perturbation along the adjoint direction (mixed partials
    commute, so d/dz (v . grad_theta L) = d/d(eps) grad_z L at theta + eps v).
    """
    grads, _ = _param_grads_and_input_grad(model64, z, labels)
    gvec = _concat(grads, names)
    gnorm = np.linalg.norm(gvec)
    tnorm = np.linalg.norm(target_vec)
    if gnorm < 1e-30:
        raise ZeroVectorError("baseline: parameter gradient vanished")
    cos = float(gvec @ target_vec / (gnorm * tnorm))
    value = 1.0 - cos

    v = -target_vec / (gnorm * tnorm) + cos * gvec / (gnorm * gnorm)
    v_rms = np.sqrt(np.mean(v * v)) + 1e-30
    theta_rms = np.sqrt(np.mean(np.concatenate(
        [p.data.reshape(-1) for p in model64.params.values()]) ** 2))
    eps = 1e-5 * (1.0 + theta_rms) / v_rms

    base = {name: p.data.copy() for name, p in model64.params.items()}
    v_slices: dict[str, np.ndarray] = {}
    pos = 0
    for name in names:
        n = base[name].size
        v_slices[name] = v[pos : pos + n].reshape(base[name].shape)
        pos += n

    for name, p in model64.params.items():
        p.data[...] = base[name] + eps * v_slices[name]
    _, gz_plus = _param_grads_and_input_grad(model64, z, labels, need_param_grads=False)
    for name, p in model64.params.items():
        p.data[...] = base[name] - eps * v_slices[name]
    _, gz_minus = _param_grads_and_input_grad(model64, z, labels, need_param_grads=False)
    for name, p in model64.params.items():
        p.data[...] = base[name]

    return value, (gz_plus - gz_minus) / (2.0 * eps)


def baseline_gradient_matching(model: Model, packet: GradientPacket, labels,
                               settings: BaselineSettings) -> tuple[np.ndarray, list[tuple[int, float]]]:
    """Optimize a full batch z so its parameter gradients match the packet
    under cosine distance, plus a TV prior; returns (images, objective trace).

    Runs in float64 throughout: the matching gradient comes from a symmetric
    finite difference in parameter space and needs the headroom.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    model64 = model.astype(np.float64)
    names = list(model64.params.keys())
    target_vec = _concat(packet.grads, names)
    shape = (n, *model.spec.input_shape)

    best: tuple[float, np.ndarray, list] | None = None
    for restart in range(settings.restarts):
        rng = np.random.Generator(np.random.PCG64([settings.seed, restart]))
        z = rng.uniform(0.0, 1.0, size=shape)
        zt = Tensor(z, requires_grad=True, dtype=np.float64)
        opt = Adam({"z": zt}, lr=settings.lr)
        trace: list[tuple[int, float]] = []
        for step in range(settings.steps):
            match_val, match_grad = baseline_matching_gradient(model64, zt.data, labels, target_vec, names)
            obj_val = match_val
            tv_grad = 0.0
            if settings.tv_weight > 0:
                with Graph() as g:
                    zg = Tensor(zt.data, requires_grad=True, dtype=np.float64)
                    tv = T.total_variation(zg)
                    g.backward(tv)
                obj_val += settings.tv_weight * float(tv.data)
                tv_grad = settings.tv_weight * zg.grad
            zt.grad = match_grad + tv_grad
            if step % 100 == 0:
                trace.append((step, obj_val))
            opt.step()
            np.clip(zt.data, 0.0, 1.0, out=zt.data)
        final_val, _ = baseline_matching_gradient(model64, zt.data, labels, target_vec, names)
        if settings.tv_weight > 0:
            final_val += settings.tv_weight * float(T.total_variation(Tensor(zt.data, dtype=np.float64)).data)
        trace.append((settings.steps, final_val))
        if best is None or final_val < best[0]:
            best = (final_val, zt.data.astype(np.float32), trace)
    assert best is not None
    return best[1], best[2]


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class AttackSettings:
    steps: int = 5000
    lr: float = 0.1
    tv_weight: float = 1e-6
    restarts: int = 5
    seed: int = 0
    invert: str = "all"  # 'none' | 'anchor' | 'all'

    def __post_init__(self):
        if self.invert not in ("none", "anchor", "all"):
            raise ValueError(f"invert mode must be none|anchor|all, got '{self.invert}'")


@dataclass
class AttackResult:
    """Attacker-side outcome for one packet."""

    labels: list[int]
    diagnostics: dict
    features: list[RestoredFeature]
    reconstructions: dict[int, np.ndarray]  # label -> (C, H, W) image
    objectives: dict[int, float]  # label -> final objective (best restart)
    restart_objectives: dict[int, list[float]]
    traces: dict[int, list[tuple[int, float]]]
    warnings: list[str]
    wall_clock: float


@dataclass
class AnchorAttack:
    """All batch attacks for one anchor plus best-of-B selection."""

    anchor_id: int
    results: list[AttackResult]
    best_by_objective: int | None  # attacker-side: lowest final inversion objective


def attack_packet(model: Model, packet: GradientPacket, settings: AttackSettings,
                  focus_label: int | None = None) -> AttackResult:
    """Label recovery, feature restoration, and (per invert mode) inversion
    for a single gradient packet."""
    start = time.perf_counter()
    head_grad = packet.head_gradient()
    n = packet.batch_size
    warnings: list[str] = []
    if n is None:
        _, pre_diag = recover_labels(head_grad, 0)
        n = pre_diag["negative_columns"]
        warnings.append(f"batch size undisclosed; using negative-column estimate N={n}")
    labels, diagnostics = recover_labels(head_grad, n)
    if diagnostics["negative_columns"] < n:
        warnings.append(
            f"duplicate-label suspicion: only {diagnostics['negative_columns']} negative-minimum "
            f"columns for batch size {n}")
    features = restore_features(head_grad, labels)

    to_invert: list[RestoredFeature] = []
    if settings.invert == "all":
        to_invert = features
    elif settings.invert == "anchor":
        if focus_label is None:
            raise ValueError("invert='anchor' needs a focus label")
        matches = [f for f in features if f.label == focus_label]
        if not matches:
            warnings.append(f"focus label {focus_label} not among recovered labels; nothing inverted")
        to_invert = matches

    reconstructions: dict[int, np.ndarray] = {}
    objectives: dict[int, float] = {}
    restart_objectives: dict[int, list[float]] = {}
    traces: dict[int, list] = {}
    for feat in to_invert:
        task = ReconstructionTask(target=feat, image_shape=model.spec.input_shape,
                                  steps=settings.steps, lr=settings.lr,
                                  tv_weight=settings.tv_weight, restarts=settings.restarts,
                                  seed=int(np.uint64(settings.seed) ^ np.uint64(feat.label * 7919 + 1)))
        try:
            inv = invert_feature(model, task)
        except ZeroFeatureError as exc:
            warnings.append(f"label {feat.label}: {exc}")
            continue
        reconstructions[feat.label] = inv.image
        objectives[feat.label] = inv.objective
        restart_objectives[feat.label] = inv.restart_objectives
        traces[feat.label] = inv.trace
        warnings.extend(inv.warnings)

    return AttackResult(labels=labels, diagnostics=diagnostics, features=features,
                        reconstructions=reconstructions, objectives=objectives,
                        restart_objectives=restart_objectives, traces=traces,
                        warnings=warnings, wall_clock=time.perf_counter() - start)


def run_attack(model: Model, anchor_packets: dict[int, list[GradientPacket]],
               settings: AttackSettings,
               anchor_labels: dict[int, int] | None = None) -> list[AnchorAttack]:
    """Attack every (anchor, batch) packet; per anchor report per-batch results
    and the attacker-side best batch (lowest final inversion objective).

    Ground-truth-based selection is an evaluation concern and lives with the
    metrics, not here.
    """
    out: list[AnchorAttack] = []
    for anchor_id in sorted(anchor_packets):
        focus = anchor_labels.get(anchor_id) if anchor_labels else None
        results = [attack_packet(model, p, settings, focus_label=focus)
                   for p in anchor_packets[anchor_id]]
        best = None
        scored = [(min(r.objectives.values()), i) for i, r in enumerate(results) if r.objectives]
        if scored:
            best = min(scored)[1]
        out.append(AnchorAttack(anchor_id=anchor_id, results=results, best_by_objective=best))
    return out
