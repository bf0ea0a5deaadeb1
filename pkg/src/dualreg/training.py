"""Patch sampling, augmentation, SGD training loop, and early stopping.

Patch centers are drawn uniformly over the region where a full input patch
fits, fixed once per cohort seed (not resampled between epochs). Flip
augmentation mirrors whole pairs along the first axis and exactly doubles
the sample pool. Plain SGD follows a step schedule: the learning rate starts
at ``lr0`` and is multiplied by ``decay`` every ``decay_every`` epochs.
Training stops when the validation loss has not improved by more than a
relative threshold for ``patience`` consecutive epochs, or at the epoch or
step cap; the best-validation parameters are returned.

Everything is deterministic given (cohort seed, training seed, config) on a
fixed platform with a fixed reduction/thread configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, record
from .losses import LossBreakdown, RegularizerConfig, loss_graph
from .network import NetworkConfig, NetworkParams, clone_params, forward
from .phantom import PhantomPair
from .volumes import (DisplacementField, LabelMap, Volume,
                      flip_x, flip_x_field, flip_x_labels)


class NumericalError(RuntimeError):
    """A non-finite loss or gradient aborted training."""


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """Four co-located patches cut at one center from a phantom pair."""

    i_ct: np.ndarray
    i_mr: np.ndarray
    i_ct_p: np.ndarray
    i_mr_p: np.ndarray
    center: tuple[int, int, int]


@dataclass(frozen=True)
class Schedule:
    lr0: float = 0.01
    decay: float = 0.5
    decay_every: int = 4
    batch_size: int = 2
    patience: int = 3
    max_epochs: int = 30
    max_steps: int | None = None
    min_rel_improvement: float = 1e-3
    momentum: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("batch_size and decay_every must be >= 1")
        if self.patience < 0 or self.max_epochs < 1:
            raise ValueError("patience must be >= 0 and max_epochs >= 1")


@dataclass
class TrainerState:
    params: NetworkParams
    schedule: Schedule
    epoch: int = 0
    steps: int = 0
    best_val: float = float("inf")
    epochs_since_improvement: int = 0
    velocities: dict = field(default_factory=dict)


def lr_at_epoch(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.lr0 * schedule.decay ** (epoch // schedule.decay_every)


def sample_patch_centers(dims, count, seed, input_size) -> np.ndarray:
    """Uniform random centers admitting a full input patch; (count, 3) ints."""
    if count < 0:
        raise ValueError("count must be >= 0")
    half = input_size // 2
    los, his = [], []
    for d in dims:
        lo = half
        hi = d - input_size + half  # last center whose patch still fits
        if hi < lo:
            raise ValueError(f"volume dims {tuple(dims)} too small for {input_size}^3 patches")
        los.append(lo)
        his.append(hi)
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(los[d], his[d] + 1, size=count) for d in range(3)], axis=1)


def extract_sample(pair: PhantomPair, center, input_size) -> TrainingSample:
    c = tuple(int(v) for v in center)
    lo = [v - input_size // 2 for v in c]
    key = tuple(slice(l, l + input_size) for l in lo)
    return TrainingSample(
        i_ct=pair.fixed_ct.voxels[key],
        i_mr=pair.moving_mr.voxels[key],
        i_ct_p=pair.paired_ct.voxels[key],
        i_mr_p=pair.paired_mr.voxels[key],
        center=c,
    )


def sample_patches(pair: PhantomPair, count, seed, input_size) -> list[TrainingSample]:
    centers = sample_patch_centers(pair.dims, count, seed, input_size)
    return [extract_sample(pair, c, input_size) for c in centers]


def augment_flip(pair: PhantomPair) -> PhantomPair:
    """Mirror a whole pair along the first axis (the field's i component flips sign)."""
    return PhantomPair(
        fixed_ct=flip_x(pair.fixed_ct), paired_mr=flip_x(pair.paired_mr),
        moving_mr=flip_x(pair.moving_mr), paired_ct=flip_x(pair.paired_ct),
        truth_field=flip_x_field(pair.truth_field),
        fixed_labels=flip_x_labels(pair.fixed_labels),
        moving_labels=flip_x_labels(pair.moving_labels),
    )


def _batch_loss(params, batch, reg_cfg, loss_mode):
    """Mean loss graph over a batch; returns (total node, mean breakdown terms)."""
    ct = np.stack([s.i_ct for s in batch])
    mr = np.stack([s.i_mr for s in batch])
    fld = forward(params, ct, mr)
    f_extent = fld.data.shape[2:]
    total = None
    terms = np.zeros(3)
    for n, s in enumerate(batch):
        f_n = ad.reshape(ad.slice_nd(fld, (slice(n, n + 1),) + (slice(None),) * 4),
                         (3,) + f_extent)
        t, ct_t, mr_t, reg_t = loss_graph(s.i_ct, s.i_mr, s.i_ct_p, s.i_mr_p,
                                          f_n, reg_cfg, loss_mode)
        total = t if total is None else ad.add(total, t)
        terms += (float(ct_t.data), float(mr_t.data), float(reg_t.data))
    total = ad.scale(total, 1.0 / len(batch))
    terms /= len(batch)
    return total, terms


def train_step(state: TrainerState, batch, reg_cfg: RegularizerConfig,
               loss_mode: str) -> LossBreakdown:
    """One SGD update on a batch; returns the batch-mean loss breakdown."""
    if not batch:
        raise ValueError("empty batch")
    params = state.params
    params.set_mode("training")
    with record() as g:
        total, terms = _batch_loss(params, batch, reg_cfg, loss_mode)
    value = float(total.data)
    if not np.isfinite(value):
        centers = [s.center for s in batch]
        raise NumericalError(f"non-finite loss {value} on batch with centers {centers}")
    backward(g, total)

    lr = lr_at_epoch(state.schedule, state.epoch)
    mom = state.schedule.momentum
    for i, t in enumerate(params.tensors()):
        if t.grad is None:
            continue
        if not np.all(np.isfinite(t.grad)):
            raise NumericalError(f"non-finite gradient in parameter {i}")
        if mom > 0:
            v = state.velocities.get(i)
            v = t.grad.copy() if v is None else mom * v + t.grad
            state.velocities[i] = v
            t.data -= (lr * v).astype(t.data.dtype)
        else:
            t.data -= (lr * t.grad).astype(t.data.dtype)
        t.grad = None
    state.steps += 1
    return LossBreakdown(value, *terms)


def evaluate_loss(params: NetworkParams, samples, reg_cfg, loss_mode,
                  batch_size=2) -> float:
    """Mean loss over fixed samples with inference-mode normalization."""
    if not samples:
        raise ValueError("no samples to evaluate")
    mode = params.mode
    params.set_mode("inference")
    try:
        vals = []
        for i in range(0, len(samples), batch_size):
            total, _ = _batch_loss(params, samples[i:i + batch_size], reg_cfg, loss_mode)
            vals.append(float(total.data) * len(samples[i:i + batch_size]))
    finally:
        params.set_mode(mode)
    return float(np.sum(vals) / len(samples))


def run_training(train_pairs, val_pairs, net_cfg: NetworkConfig, schedule: Schedule,
                 reg_cfg: RegularizerConfig, loss_mode: str, seed: int,
                 samples_per_pair: int = 400, val_samples_per_pair: int = 32,
                 augment: bool = True, log=None):
    """Full training run; returns (best-validation NetworkParams, history).

    ``train_pairs`` and ``val_pairs`` are the caller's split. With
    ``augment`` each training pair also contributes its x-flipped twin, so
    the sample pool doubles.
    """
    if not train_pairs or not val_pairs:
        raise ValueError("empty train or validation split")
    rng = np.random.default_rng(seed)
    params = NetworkParams.__new__(NetworkParams)  # placeholder; replaced below
    from .network import init_params
    params = init_params(net_cfg, seed=int(rng.integers(0, 2 ** 31)))
    state = TrainerState(params=params, schedule=schedule)

    pool = list(train_pairs)
    if augment:
        pool += [augment_flip(p) for p in train_pairs]
    pair_samples = []
    for pair in pool:
        s = int(rng.integers(0, 2 ** 31))
        centers = sample_patch_centers(pair.dims, samples_per_pair, s, net_cfg.input_size)
        pair_samples.extend((pair, tuple(c)) for c in centers)

    val_samples = []
    for pair in val_pairs:
        s = int(rng.integers(0, 2 ** 31))
        centers = sample_patch_centers(pair.dims, val_samples_per_pair, s, net_cfg.input_size)
        val_samples.extend(extract_sample(pair, c, net_cfg.input_size) for c in centers)

    history = []
    best_params = clone_params(params)
    order = np.arange(len(pair_samples))
    stop = False
    while state.epoch < schedule.max_epochs and not stop:
        rng.shuffle(order)
        breakdowns = []
        for b0 in range(0, len(order) - schedule.batch_size + 1, schedule.batch_size):
            idx = order[b0:b0 + schedule.batch_size]
            batch = [extract_sample(pair_samples[i][0], pair_samples[i][1], net_cfg.input_size)
                     for i in idx]
            breakdowns.append(train_step(state, batch, reg_cfg, loss_mode))
            if schedule.max_steps is not None and state.steps >= schedule.max_steps:
                stop = True
                break
        val = evaluate_loss(params, val_samples, reg_cfg, loss_mode, schedule.batch_size)
        mean = lambda k: float(np.mean([getattr(b, k) for b in breakdowns])) if breakdowns else float("nan")
        entry = {
            "epoch": state.epoch,
            "lr": lr_at_epoch(schedule, state.epoch),
            "steps": state.steps,
            "train_total": mean("total"),
            "train_ct": mean("ct_term"),
            "train_mr": mean("mr_term"),
            "train_reg": mean("reg_term"),
            "val_total": val,
        }
        improved = val < state.best_val * (1.0 - schedule.min_rel_improvement)
        if improved:
            state.best_val = val
            state.epochs_since_improvement = 0
            best_params = clone_params(params)
        else:
            state.epochs_since_improvement += 1
        entry["best_val"] = state.best_val
        history.append(entry)
        if log is not None:
            log(entry)
        state.epoch += 1
        if state.epochs_since_improvement >= schedule.patience:
            stop = True
    best_params.set_mode("inference")
    return best_params, history


def predict_sample_field(params: NetworkParams, sample: TrainingSample) -> DisplacementField:
    """Inference-mode field for one sample (diagnostics)."""
    from .network import predict_field
    return predict_field(params, sample.i_ct, sample.i_mr)
