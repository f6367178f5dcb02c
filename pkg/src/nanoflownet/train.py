"""Adam training loop, guidance modes and finite-difference gradient checks."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph
from .losses import (GUIDANCE_MODES, FocalLossCfg, combined_loss, edge_detect_gt,
                     endpoint_error)
from .stdc import stack_frames
from .synthetic import SyntheticSample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    guidance_mode: str = "motion-boundary"
    lambda_detail: float = 1.0
    seed: int = 0
    val_fraction: float = 0.2
    flip_augment: bool = True
    # optional second phase at a lowered rate (the fine-tuning stage)
    finetune_epochs: int = 0
    finetune_learning_rate: float = 1e-4
    focal: FocalLossCfg = field(default_factory=FocalLossCfg)

    def validate(self):
        if self.learning_rate <= 0 or self.finetune_learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance_mode must be one of {GUIDANCE_MODES}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Parameters without a gradient entry are treated as having zero gradient.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        elif np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape} for {k!r}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# --------------------------------------------------------------------------
# batching


def make_batch(samples: list[SyntheticSample], flips: np.ndarray | None = None):
    """Network input, flow GT ``(N,H,W,2)`` and boundary GT ``(N,H,W,1)``."""
    f0 = np.stack([s.frame0 for s in samples])
    f1 = np.stack([s.frame1 for s in samples])
    flow = np.stack([s.flow for s in samples]).astype(np.float64)
    bnd = np.stack([s.boundary for s in samples]).astype(np.float64)
    if flips is not None and flips.any():
        f0, f1, flow, bnd = f0.copy(), f1.copy(), flow.copy(), bnd.copy()
        f0[flips] = f0[flips, :, ::-1]
        f1[flips] = f1[flips, :, ::-1]
        flow[flips] = flow[flips, :, ::-1]
        flow[flips, ..., 0] *= -1.0
        bnd[flips] = bnd[flips, :, ::-1]
    return stack_frames(f0, f1), flow, bnd[..., None]


def detail_target(mode: str, gt_flow: np.ndarray, gt_boundary: np.ndarray | None):
    if mode == "none":
        return None
    if mode == "edge-detect":
        return edge_detect_gt(gt_flow)[..., None]
    if gt_boundary is None:
        raise TrainingError("motion-boundary guidance needs boundary ground truth")
    return gt_boundary


def loss_and_grads(graph: Graph, x, gt_flow, gt_boundary, mode: str, lambda_detail: float,
                   focal: FocalLossCfg | None = None, training: bool = True):
    """Forward + backward for one batch. Returns ``(loss, parts, grads, cache)``."""
    outs, cache = graph.forward(x, training=training, keep_cache=True)
    target = detail_target(mode, gt_flow, gt_boundary)
    total, parts, g_flow, g_det = combined_loss(
        outs["flow"], outs.get("detail"), gt_flow, target, lambda_detail, mode, focal)
    og = {"flow": g_flow}
    if g_det is not None:
        og["detail"] = g_det
    grads = graph.backward(cache, og, training=training)
    return total, parts, grads, cache


def split_indices(n: int, val_fraction: float, seed: int):
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_val = int(round(n * val_fraction))
    if n - n_val < 1:
        raise ValueError("validation split leaves no training data")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def evaluate(graph: Graph, samples: list[SyntheticSample], batch_size: int = 16) -> float:
    """Mean per-sample EPE with inference-mode normalization.

    Accepts anything with a ``forward`` returning ``{"flow": ...}``.
    """
    if not samples:
        return float("nan")
    infer = graph.inference_graph() if "detail" in getattr(graph, "outputs", {}) else graph
    errs = []
    for i in range(0, len(samples), batch_size):
        x, flow, _ = make_batch(samples[i:i + batch_size])
        pred = infer.forward(x)["flow"]
        errs.extend(endpoint_error(p, g) for p, g in zip(pred, flow))
    return float(np.mean(errs))


@dataclass
class TrainResult:
    graph: Graph
    history: list[dict]
    initial_val_epe: float
    best_val_epe: float
    best_epoch: int

    def history_csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "phase", "lr", "train_loss", "train_epe", "train_detail", "val_epe"]
        wr = csv.DictWriter(buf, fieldnames=cols)
        wr.writeheader()
        for row in self.history:
            wr.writerow({k: (f"{row[k]:.8g}" if isinstance(row[k], float) else row[k]) for k in cols})
        return buf.getvalue()


def train(graph: Graph, dataset: list[SyntheticSample], cfg: TrainConfig,
          val_set: list[SyntheticSample] | None = None, progress=None) -> TrainResult:
    """Train ``graph`` in place-free fashion; returns the best-validation copy.

    Without an explicit ``val_set`` the dataset is split 80/20 by a seeded
    permutation. ``progress`` (if given) is called with each history row.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("empty dataset")
    if val_set is None:
        tr_idx, va_idx = split_indices(len(dataset), cfg.val_fraction, cfg.seed)
        train_set = [dataset[i] for i in tr_idx]
        val_set = [dataset[i] for i in va_idx]
    else:
        train_set = list(dataset)
    if cfg.guidance_mode != "none" and "detail" not in graph.outputs:
        raise TrainingError("guided training needs a graph built with the detail head")

    g = graph.copy()
    rng = np.random.default_rng([cfg.seed, 11])
    state = AdamState.zeros_like(g.params)
    initial = evaluate(g, val_set)
    best_val, best_epoch = initial, 0
    best_graph = g.copy()
    history: list[dict] = []
    phases = [("main", cfg.learning_rate, cfg.epochs), ("finetune", cfg.finetune_learning_rate, cfg.finetune_epochs)]
    epoch = 0
    for phase, lr, n_epochs in phases:
        for _ in range(n_epochs):
            epoch += 1
            order = rng.permutation(len(train_set))
            tot = epe_sum = det_sum = 0.0
            nb = 0
            for bi in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[bi:bi + cfg.batch_size]]
                flips = rng.random(len(batch)) < 0.5 if cfg.flip_augment else None
                x, gt_flow, gt_bnd = make_batch(batch, flips)
                loss, parts, grads, cache = loss_and_grads(
                    g, x, gt_flow, gt_bnd, cfg.guidance_mode, cfg.lambda_detail, cfg.focal)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {nb}")
                g.params, state = adam_step(g.params, grads, state, lr)
                g.update_running_stats(cache)
                tot += loss
                epe_sum += parts["epe"]
                det_sum += parts["detail"]
                nb += 1
            val = evaluate(g, val_set)
            row = {"epoch": epoch, "phase": phase, "lr": lr, "train_loss": tot / nb,
                   "train_epe": epe_sum / nb, "train_detail": det_sum / nb, "val_epe": val}
            history.append(row)
            log.info("epoch %d %s loss=%.4f val_epe=%.4f", epoch, phase, row["train_loss"], val)
            if progress is not None:
                progress(row)
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_graph = g.copy()
    return TrainResult(best_graph, history, initial, best_val, best_epoch)


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    checked: int
    max_rel_error: float
    failures: list[tuple[str, tuple, float, float]]
    excluded_kinks: list[tuple[str, tuple]]
    tolerance: float

    @property
    def ok(self) -> bool:
        return not self.failures


def _relu_signs(graph: Graph, cache: dict):
    return {n.id: cache[n.inputs[0]] > 0 for n in graph.nodes if n.kind == "relu"}


def grad_check(graph: Graph, x, gt_flow, gt_boundary=None, mode: str = "none",
               lambda_detail: float = 1.0, tolerance: float = 1e-3, n_coords: int = 200,
               eps: float = 1e-5, seed: int = 0, focal: FocalLossCfg | None = None,
               training: bool = True) -> GradCheckReport:
    """Compare analytic parameter gradients of the combined loss to central differences.

    Coordinates whose +/- perturbation flips any ReLU input sign are
    non-differentiable there; they are skipped and listed in the report.
    """
    g = graph.copy()

    def loss_at():
        outs, cache = g.forward(x, training=training, keep_cache=True)
        target = detail_target(mode, gt_flow, gt_boundary)
        val = combined_loss(outs["flow"], outs.get("detail"), gt_flow, target,
                            lambda_detail, mode, focal)[0]
        return val, _relu_signs(g, cache)

    _, _, grads, cache = loss_and_grads(g, x, gt_flow, gt_boundary, mode, lambda_detail, focal, training)
    base_signs = _relu_signs(g, cache)
    rng = np.random.default_rng(seed)
    names = [k for k in sorted(g.params) if g.params[k].size]
    sizes = np.array([g.params[k].size for k in names], dtype=float)
    failures, kinks = [], []
    max_err = 0.0
    checked = 0
    attempts = 0
    while checked < n_coords and attempts < 20 * n_coords:
        attempts += 1
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = g.params[name]
        idx = tuple(int(rng.integers(0, d)) for d in p.shape)
        if name not in grads:
            continue
        orig = p[idx]
        p[idx] = orig + eps
        lp, sp = loss_at()
        p[idx] = orig - eps
        lm, sm = loss_at()
        p[idx] = orig
        if any(not np.array_equal(sp[k], base_signs[k]) or not np.array_equal(sm[k], base_signs[k])
               for k in base_signs):
            kinks.append((name, idx))
            continue
        fd = (lp - lm) / (2 * eps)
        an = float(grads[name][idx])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        max_err = max(max_err, rel)
        if rel > tolerance:
            failures.append((name, idx, an, fd))
        checked += 1
    return GradCheckReport(checked, max_err, failures, kinks, tolerance)
