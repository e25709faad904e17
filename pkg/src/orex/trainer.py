"""Loss assembly and the training loop.

The data term is binary cross-entropy applied to the logit after every
refinement step, so intermediate estimates are supervised too. A hinge
penalty bounds the spatial gradient magnitude of the final logit near the
contours: steep in/out cliffs alias badly when the field is later sampled
on an extraction grid, so slopes above the threshold are taxed. The spatial
gradient is taken by central differences, which keeps differentiation
first-order (six extra forward passes that gradients flow through).
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from . import field as F
from .hull import CoplanarPointsError, convex_hull_scaled, obb_extruded_hull
from .sampler import (
    CurriculumSchedule,
    SampleBudget,
    SampleClass,
    SampleSet,
    epoch_batch,
    generate_samples,
)
from .slices import CrossSectionSet


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    hinge_weight: float = 0.1
    hinge_threshold: float = 10.0
    fd_step: Optional[float] = None  # None: resolved against the band ladder
    hinge_fraction: float = 0.25

    def __post_init__(self):
        if self.hinge_weight < 0 or self.hinge_threshold < 0:
            raise ValueError("hinge weight and threshold must be >= 0")
        if not 0.0 < self.hinge_fraction <= 1.0:
            raise ValueError("hinge_fraction must be in (0, 1]")
        if self.fd_step is not None and self.fd_step <= 0:
            raise ValueError("fd_step must be positive")

    def resolve(self, schedule: CurriculumSchedule) -> "LossConfig":
        """Pin fd_step below half the finest band so the finite-difference
        probes stay inside the tightest sample shell."""
        cap = float(schedule.band_distances[-1]) / 2.0
        step = min(1e-4, cap) if self.fd_step is None else self.fd_step
        if step > cap:
            raise ValueError(f"fd_step {step:g} exceeds half the finest band distance {cap:g}")
        return dataclasses.replace(self, fd_step=step)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 4096
    learning_rate: float = 1e-3
    learning_rate_final: float = 1e-5
    seed: int = 0
    checkpoint_every: int = 200
    curriculum: bool = True
    n_bands: int = 10
    ramp_fraction: float = 0.7
    probe_resolution: int = 17
    log_every: int = 100

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.learning_rate
        t = epoch / (self.epochs - 1)
        return self.learning_rate_final + 0.5 * (
            self.learning_rate - self.learning_rate_final
        ) * (1.0 + np.cos(np.pi * t))


@dataclass(eq=False)
class TrainReport:
    bce: np.ndarray  # (epochs,)
    hinge: np.ndarray
    window_start: np.ndarray
    lr: np.ndarray
    seconds: np.ndarray
    refinement_deltas: np.ndarray  # (refine_steps - 1,) mean |Y_i - Y_{i-1}| on probes
    dropped_static: int = 0

    def to_csv(self, path) -> None:
        lines = ["epoch,bce,hinge,band_window,lr,seconds"]
        for e in range(len(self.bce)):
            lines.append(
                f"{e},{self.bce[e]:.6g},{self.hinge[e]:.6g},"
                f"{int(self.window_start[e])},{self.lr[e]:.6g},{self.seconds[e]:.3f}"
            )
        for i, d in enumerate(self.refinement_deltas, start=2):
            lines.append(f"# refinement_delta step={i} mean_abs_dY={d:.6g}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def bce_on_logit(logit, label) -> np.ndarray:
    """Numerically stable -[y log sigma(f) + (1-y) log(1 - sigma(f))]."""
    logit = np.asarray(logit, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    return np.maximum(logit, 0.0) - logit * label + np.log1p(np.exp(-np.abs(logit)))


def spatial_gradient(params: F.FieldParams, points: np.ndarray, fd_step: float) -> np.ndarray:
    """Central-difference gradient of the final-step logit, (n, 3)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    probes = _fd_probes(points, fd_step)
    vals = F.forward(params, probes.reshape(-1, 3)).final.astype(np.float64)
    vals = vals.reshape(len(points), 6)
    return (vals[:, 0::2] - vals[:, 1::2]) / (2.0 * fd_step)


def _fd_probes(points: np.ndarray, eps: float) -> np.ndarray:
    """(n, 6, 3) probe layout: +x, -x, +y, -y, +z, -z per point."""
    n = len(points)
    probes = np.repeat(points[:, None, :], 6, axis=1)
    for axis in range(3):
        probes[:, 2 * axis, axis] += eps
        probes[:, 2 * axis + 1, axis] -= eps
    return probes


def total_loss(
    params: F.FieldParams,
    batch: SampleSet,
    cfg: LossConfig,
    rng: Optional[np.random.Generator] = None,
    probe_chunk: int = 8192,
):
    """Mean multi-step BCE plus the weighted hinge penalty, with exact
    parameter gradients through both terms.

    The hinge is evaluated on a random ``hinge_fraction`` subset of the
    batch's boundary-class points and only on the final refinement step.
    Returns ``(loss, grads, parts)`` where parts splits the two terms.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if cfg.fd_step is None:
        raise ValueError("LossConfig.fd_step unresolved; call cfg.resolve(schedule)")
    dtype = params.dtype
    n_steps = params.arch.refine_steps
    out = F.forward(params, batch.positions, want_cache=True)
    labels = batch.labels.astype(np.float64)

    n = len(batch)
    bce_total = float(np.mean(bce_on_logit(out.logits, labels[:, None])))
    d_logits = (expit(out.logits.astype(np.float64)) - labels[:, None]) / (n_steps * n)
    grads = F.backward(params, out, d_logits.astype(dtype))

    hinge_total = 0.0
    n_hinge = 0
    if cfg.hinge_weight > 0.0:
        b_idx = np.nonzero(batch.classes == SampleClass.BOUNDARY)[0]
        if len(b_idx):
            k = max(1, int(round(cfg.hinge_fraction * len(b_idx))))
            if k < len(b_idx):
                if rng is None:
                    raise ValueError("rng required when subsampling hinge points")
                b_idx = np.sort(rng.choice(b_idx, size=k, replace=False))
            n_hinge = len(b_idx)
            eps = cfg.fd_step
            probes = _fd_probes(batch.positions[b_idx], eps)
            lam = cfg.hinge_weight
            for s in range(0, n_hinge, probe_chunk):
                chunk = probes[s : s + probe_chunk]
                m = len(chunk)
                pf = F.forward(params, chunk.reshape(-1, 3), want_cache=True)
                vals = pf.final.astype(np.float64).reshape(m, 6)
                g = (vals[:, 0::2] - vals[:, 1::2]) / (2.0 * eps)
                norm = np.linalg.norm(g, axis=1)
                excess = norm - cfg.hinge_threshold
                active = excess > 0.0
                hinge_total += float(excess[active].sum())
                # d(mean hinge)/d g = g / |g| on active points, then split the
                # central difference onto the two probes of each axis
                d_g = np.zeros_like(g)
                if np.any(active):
                    d_g[active] = g[active] / norm[active, None]
                d_vals = np.empty((m, 6))
                d_vals[:, 0::2] = d_g / (2.0 * eps)
                d_vals[:, 1::2] = -d_g / (2.0 * eps)
                d_probe = np.zeros((m * 6, n_steps))
                d_probe[:, -1] = d_vals.reshape(-1)
                scale = lam / n_hinge
                hgrads = F.backward(params, pf, (d_probe * scale).astype(dtype))
                _accumulate(grads, hgrads)
            hinge_total /= n_hinge

    loss = bce_total + cfg.hinge_weight * hinge_total
    parts = {"bce": bce_total, "hinge": hinge_total, "n_hinge": n_hinge}
    return loss, grads, parts


def _accumulate(dst: F.FieldParams, src: F.FieldParams) -> None:
    for a, b in zip(dst.flat_arrays(), src.flat_arrays()):
        a += b


def refinement_probe(model: F.FieldModel, resolution: int) -> np.ndarray:
    """Mean |Y_i - Y_{i-1}| per refinement step on a probe lattice, length N-1."""
    lo, hi = model.grid_bounds if model.grid_bounds else (np.full(3, -1.0), np.full(3, 1.0))
    axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    y = expit(model.evaluate_steps(grid))
    return np.abs(np.diff(y, axis=1)).mean(axis=0)


def train(
    cs_set: CrossSectionSet,
    arch: F.FieldArch = F.FieldArch(),
    budget: SampleBudget = SampleBudget(),
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    out_dir=None,
    log=None,
):
    """Fit the field to a cross-section set.

    Per epoch the boundary population is redrawn with jittered anchors, the
    curriculum window picks the active bands, and minibatches flow through
    Adam. Checkpoints land in ``out_dir`` every ``checkpoint_every`` epochs
    (plus the final one) and stay valid if training is interrupted.
    Returns ``(FieldModel, TrainReport)``; fully deterministic for a fixed
    seed and input.
    """
    try:
        hull = convex_hull_scaled(cs_set, 1.05)
    except CoplanarPointsError:
        hull = obb_extruded_hull(cs_set, 1.05)
    schedule = CurriculumSchedule.build(
        cs_set.diag_normalized,
        train_cfg.epochs,
        n_bands=train_cfg.n_bands,
        ramp_fraction=train_cfg.ramp_fraction,
    )
    budget.validate_for(cs_set, schedule.n_bands)
    loss_cfg = loss_cfg.resolve(schedule)

    seed = train_cfg.seed
    static = generate_samples(
        cs_set, hull, budget, schedule, np.random.default_rng([seed, 0]), include_static=True
    )
    static = static.select(static.classes != SampleClass.BOUNDARY)
    # training points must stay inside the hull's bounding box (and the
    # encoding's well-behaved domain); inflated plane bboxes can poke out
    lo, hi = hull.bbox
    inside = np.all((static.positions >= lo) & (static.positions <= hi), axis=1)
    dropped = int(len(static) - inside.sum())
    static = static.select(inside)

    params = F.init_params(arch, np.random.default_rng([seed, 1]), dtype=np.float32)
    adam = F.AdamState.for_params(params.flat_arrays())

    pad = 0.02 * float((hi - lo).max())
    grid_bounds = (lo - pad, hi + pad)
    model = F.FieldModel(params, cs_set.normalization, cs_set.diag, grid_bounds)

    epochs = train_cfg.epochs
    rep_bce = np.zeros(epochs)
    rep_hinge = np.zeros(epochs)
    rep_window = np.zeros(epochs, dtype=np.intp)
    rep_lr = np.zeros(epochs)
    rep_sec = np.zeros(epochs)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for epoch in range(epochs):
        t0 = time.perf_counter()
        boundary = generate_samples(
            cs_set,
            hull,
            budget,
            schedule,
            np.random.default_rng([seed, 2, epoch]),
            include_static=False,
        )
        pool = SampleSet.concatenate([static, boundary])
        batch_all = epoch_batch(
            pool,
            schedule,
            epoch,
            np.random.default_rng([seed, 3, epoch]),
            curriculum=train_cfg.curriculum,
        )
        lr = train_cfg.lr_at(epoch)
        bce_sum = hinge_sum = 0.0
        n_batches = 0
        for bi, start in enumerate(range(0, len(batch_all), train_cfg.batch_size)):
            mb = batch_all.select(slice(start, start + train_cfg.batch_size))
            try:
                _, grads, parts = total_loss(
                    params, mb, loss_cfg, np.random.default_rng([seed, 4, epoch, bi])
                )
                F.adam_step(params.flat_arrays(), grads.flat_arrays(), adam, lr)
            except F.FieldNumericsError as exc:
                raise TrainingError(
                    f"non-finite value at epoch {epoch}, batch {bi} "
                    f"(first sample index {start}): {exc}"
                ) from exc
            bce_sum += parts["bce"]
            hinge_sum += parts["hinge"]
            n_batches += 1

        rep_bce[epoch] = bce_sum / max(1, n_batches)
        rep_hinge[epoch] = hinge_sum / max(1, n_batches)
        rep_window[epoch] = schedule.window_starts[epoch] if train_cfg.curriculum else -1
        rep_lr[epoch] = lr
        rep_sec[epoch] = time.perf_counter() - t0

        if out_path is not None and train_cfg.checkpoint_every > 0:
            if (epoch + 1) % train_cfg.checkpoint_every == 0 and epoch + 1 < epochs:
                _save_atomic(model, out_path / f"ckpt_{epoch + 1}.orex")
        if log is not None and (epoch % train_cfg.log_every == 0 or epoch == epochs - 1):
            log(
                f"epoch {epoch}: bce={rep_bce[epoch]:.5f} hinge={rep_hinge[epoch]:.5f} "
                f"window={rep_window[epoch]} lr={lr:.2e} ({rep_sec[epoch]:.2f}s)"
            )

    report = TrainReport(
        bce=rep_bce,
        hinge=rep_hinge,
        window_start=rep_window,
        lr=rep_lr,
        seconds=rep_sec,
        refinement_deltas=refinement_probe(model, train_cfg.probe_resolution),
        dropped_static=dropped,
    )
    if out_path is not None:
        _save_atomic(model, out_path / f"ckpt_{epochs}.orex")
        report.to_csv(out_path / "train_report.csv")
    return model, report


def _save_atomic(model: F.FieldModel, path: Path) -> None:
    tmp = path.with_suffix(".tmp")
    F.save_checkpoint(model, tmp)
    os.replace(tmp, path)
