"""Similarity and smoothness losses for displacement-field training.

The dissimilarity between two same-modality patches is one minus their
normalized cross-correlation: the inner product of mean-subtracted,
L2-normalized intensity vectors, giving a value in [0, 2]. A small epsilon
inside each norm's square root keeps constant patches (air, background)
finite: the value then degrades smoothly toward 1 instead of failing.

The field regularizer penalizes the squared Laplacian of each component
(mean over interior voxels and components, weight ``lambda1``) plus the
squared magnitude (mean over all voxels and components, weight ``lambda2``).
Means rather than sums keep the weights independent of patch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .volumes import DisplacementField
from .warp import warp_op

NCC_EPS = 1e-5

LOSS_MODES = ("dual", "ct", "mr")


@dataclass(frozen=True)
class RegularizerConfig:
    lambda1: float = 0.5
    lambda2: float = 0.01

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    """One forward pass worth of loss terms; all plain floats."""

    total: float
    ct_term: float
    mr_term: float
    reg_term: float

    def __post_init__(self):
        vals = (self.total, self.ct_term, self.mr_term, self.reg_term)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite loss terms: {vals}")


def ncc_op(a: Tensor, b: Tensor, eps: float = NCC_EPS) -> Tensor:
    """Graph node for the NCC dissimilarity of two equally shaped patches."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"patch shapes differ: {a.data.shape} vs {b.data.shape}")
    ac = ad.sub(a, ad.tmean(a))
    bc = ad.sub(b, ad.tmean(b))
    na = ad.sqrt(ad.add_scalar(ad.tsum(ad.mul(ac, ac)), eps))
    nb = ad.sqrt(ad.add_scalar(ad.tsum(ad.mul(bc, bc)), eps))
    corr = ad.div(ad.tsum(ad.mul(ac, bc)), ad.mul(na, nb))
    return ad.add_scalar(ad.scale(corr, -1.0), 1.0)


def smoothness_op(field: Tensor, cfg: RegularizerConfig) -> Tensor:
    """Graph node for the field regularizer; ``field`` has shape (3, d, h, w)."""
    shape = field.data.shape
    if len(shape) != 4 or shape[0] != 3:
        raise ValueError(f"field tensor must be (3, d, h, w), got {shape}")
    if min(shape[1:]) < 3:
        raise ValueError(f"field extent {shape[1:]} too small for the Laplacian stencil")
    c = slice(1, -1)
    a = slice(None)
    center = ad.slice_nd(field, (a, c, c, c))
    lap = ad.scale(center, -6.0)
    for key in [
        (a, slice(2, None), c, c),
        (a, slice(0, -2), c, c),
        (a, c, slice(2, None), c),
        (a, c, slice(0, -2), c),
        (a, c, c, slice(2, None)),
        (a, c, c, slice(0, -2)),
    ]:
        lap = ad.add(lap, ad.slice_nd(field, key))
    lap_term = ad.scale(ad.tmean(ad.mul(lap, lap)), cfg.lambda1)
    mag_term = ad.scale(ad.tmean(ad.mul(field, field)), cfg.lambda2)
    return ad.add(lap_term, mag_term)


def _center_key(patch_dims, field_dims):
    margins = []
    for p, f in zip(patch_dims, field_dims):
        if p < f or (p - f) % 2:
            raise ValueError(f"patch dims {patch_dims} incompatible with field dims {field_dims}")
        margins.append((p - f) // 2)
    return tuple(slice(m, m + f) for m, f in zip(margins, field_dims)), tuple(margins)


def loss_graph(i_ct, i_mr, i_ct_p, i_mr_p, field: Tensor, cfg: RegularizerConfig, mode: str):
    """Build the training loss for one sample; returns (total, ct, mr, reg) nodes.

    The four patches are plain arrays (data, not learnable); ``field`` is the
    graph tensor the gradient flows through. In single-modality modes the
    omitted term is still evaluated for diagnostics but does not enter the
    total, and the remaining term carries unit weight.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    patches = [np.asarray(p) for p in (i_ct, i_mr, i_ct_p, i_mr_p)]
    if len({p.shape for p in patches}) != 1:
        raise ValueError("the four sample patches must share one shape")
    key, margins = _center_key(patches[0].shape, field.data.shape[1:])

    warped_ct = warp_op(Tensor(patches[2], requires_grad=False), field, margins)
    warped_mr = warp_op(Tensor(patches[1], requires_grad=False), field, margins)
    ct_term = ncc_op(Tensor(patches[0][key], requires_grad=False), warped_ct)
    mr_term = ncc_op(Tensor(patches[3][key], requires_grad=False), warped_mr)
    reg = smoothness_op(field, cfg)

    if mode == "dual":
        total = ad.add(ad.add(ad.scale(ct_term, 0.5), ad.scale(mr_term, 0.5)), reg)
    elif mode == "ct":
        total = ad.add(ct_term, reg)
    else:
        total = ad.add(mr_term, reg)
    return total, ct_term, mr_term, reg


# ---------------------------------------------------------------------------
# Plain-value wrappers over the graph builders


def _as_array(x):
    return x.voxels if hasattr(x, "voxels") else np.asarray(x)


def ncc_dissimilarity(a, b) -> float:
    """NCC dissimilarity in [0, 2] of two Volumes or arrays of equal shape."""
    return float(ncc_op(Tensor(_as_array(a)), Tensor(_as_array(b))).data)


def smoothness_penalty(field: DisplacementField, cfg: RegularizerConfig = RegularizerConfig()) -> float:
    return float(smoothness_op(Tensor(field.components), cfg).data)


def _breakdown(sample, field, cfg, mode) -> LossBreakdown:
    comp = field.components if isinstance(field, DisplacementField) else np.asarray(field)
    total, ct, mr, reg = loss_graph(
        sample.i_ct, sample.i_mr, sample.i_ct_p, sample.i_mr_p, Tensor(comp), cfg, mode
    )
    return LossBreakdown(float(total.data), float(ct.data), float(mr.data), float(reg.data))


def dual_modality_loss(sample, field, cfg: RegularizerConfig = RegularizerConfig()) -> LossBreakdown:
    """Eq.-style dual supervision: half of each modality term plus the regularizer."""
    return _breakdown(sample, field, cfg, "dual")


def single_modality_loss(sample, field, cfg: RegularizerConfig, modality: str) -> LossBreakdown:
    """Single-sided supervision: the chosen term at unit weight plus the regularizer."""
    if modality not in ("ct", "mr"):
        raise ValueError(f"modality must be 'ct' or 'mr', got {modality!r}")
    return _breakdown(sample, field, cfg, modality)
