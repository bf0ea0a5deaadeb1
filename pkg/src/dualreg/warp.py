"""Differentiable trilinear warping of a moving image by a displacement field.

For every output voxel x (on the field grid) the sample location in the
moving image is ``x + margin + field(x)``. The value is the trilinear
combination over the 8-voxel neighborhood of that location, with per-axis
weights ``1 - |s_d - y_d|``. Sample coordinates are clamped to the moving
image boundary before interpolation; the gradient with respect to the field
is exactly zero wherever the clamp was active (the clamp is locally
constant there). The layer holds no learnable state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, register_op, _accum
from .volumes import DisplacementField, Volume


@dataclass(frozen=True, eq=False)
class WarpContext:
    """A moving patch, the field that resamples it, and the implied margin.

    The moving extent minus the field extent must be even and non-negative
    on every axis; half of it is the per-axis margin of spatial context.
    """

    moving: Volume
    field: DisplacementField

    def __post_init__(self):
        for m, f in zip(self.moving.dims, self.field.dims):
            if m < f or (m - f) % 2:
                raise ValueError(
                    f"moving dims {self.moving.dims} incompatible with field dims {self.field.dims}"
                )
        if min(self.moving.dims) < 2:
            raise ValueError("moving image needs at least 2 voxels per axis")

    @property
    def margin(self) -> tuple[int, int, int]:
        return tuple((m - f) // 2 for m, f in zip(self.moving.dims, self.field.dims))


def _cells(moving: np.ndarray, field: np.ndarray, margins):
    """Clamped interpolation cells: corner indices, fractional offsets, clamp masks."""
    dims = moving.shape
    axes = []
    for d in range(3):
        grid_shape = [1, 1, 1]
        grid_shape[d] = field.shape[1 + d]
        base = np.arange(field.shape[1 + d], dtype=field.dtype).reshape(grid_shape)
        s = base + field.dtype.type(margins[d]) + field[d]
        inside = (s >= 0) & (s <= dims[d] - 1)
        sc = np.clip(s, 0, dims[d] - 1)
        i0 = np.minimum(sc.astype(np.int64), dims[d] - 2)
        axes.append((i0, sc - i0, inside))
    return axes


def _gather(moving, axes):
    """The 8 corner-value arrays of each interpolation cell."""
    (i0, _, _), (j0, _, _), (k0, _, _) = axes
    vals = {}
    for ci in (0, 1):
        for cj in (0, 1):
            for ck in (0, 1):
                vals[ci, cj, ck] = moving[i0 + ci, j0 + cj, k0 + ck]
    return vals


def warp_array(moving: np.ndarray, field: np.ndarray, margins) -> np.ndarray:
    """Raw kernel: trilinearly resample ``moving`` at ``x + margin + field(x)``."""
    axes = _cells(moving, field, margins)
    vals = _gather(moving, axes)
    (_, fi, _), (_, fj, _), (_, fk, _) = axes
    wi, wj, wk = (1 - fi, fi), (1 - fj, fj), (1 - fk, fk)
    out = np.zeros(field.shape[1:], dtype=np.result_type(moving.dtype, field.dtype))
    for (ci, cj, ck), v in vals.items():
        out += wi[ci] * wj[cj] * wk[ck] * v
    return out


def warp_gradients(moving: np.ndarray, field: np.ndarray, margins, upstream: np.ndarray,
                   need_moving: bool = True):
    """Gradients of the warp output w.r.t. the field and the moving values.

    Returns ``(grad_field, grad_moving)``. The field gradient comes from the
    piecewise-linear interpolation weights and is zeroed where the sample
    coordinate was clamped; the moving gradient scatters the interpolation
    weights back onto the 8 corners (needed for gradient checks only, so it
    can be skipped with ``need_moving=False``).
    """
    axes = _cells(moving, field, margins)
    vals = _gather(moving, axes)
    (_, fi, mi), (_, fj, mj), (_, fk, mk) = axes
    wi, wj, wk = (1 - fi, fi), (1 - fj, fj), (1 - fk, fk)

    gi = np.zeros_like(upstream)
    gj = np.zeros_like(upstream)
    gk = np.zeros_like(upstream)
    for cj in (0, 1):
        for ck in (0, 1):
            gi += wj[cj] * wk[ck] * (vals[1, cj, ck] - vals[0, cj, ck])
    for ci in (0, 1):
        for ck in (0, 1):
            gj += wi[ci] * wk[ck] * (vals[ci, 1, ck] - vals[ci, 0, ck])
    for ci in (0, 1):
        for cj in (0, 1):
            gk += wi[ci] * wj[cj] * (vals[ci, cj, 1] - vals[ci, cj, 0])
    grad_field = np.stack([upstream * gi * mi, upstream * gj * mj, upstream * gk * mk])
    grad_field = grad_field.astype(field.dtype, copy=False)
    if not need_moving:
        return grad_field, None

    (i0, _, _), (j0, _, _), (k0, _, _) = axes
    nmov = moving.size
    flat = np.zeros(nmov, dtype=np.result_type(moving.dtype, field.dtype))
    _, H, W = moving.shape
    for (ci, cj, ck) in vals:
        idx = ((i0 + ci) * H + (j0 + cj)) * W + (k0 + ck)
        contrib = wi[ci] * wj[cj] * wk[ck] * upstream
        flat += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=nmov)
    grad_moving = flat.reshape(moving.shape).astype(moving.dtype, copy=False)
    return grad_field, grad_moving


def warp_op(moving: Tensor, field: Tensor, margins) -> Tensor:
    """Graph primitive: differentiable warp for training and gradient checks."""
    margins = tuple(int(m) for m in margins)
    out = Tensor(warp_array(moving.data, field.data, margins))

    def fwd():
        out.data = warp_array(moving.data, field.data, margins)

    def bwd(g):
        gf, gm = warp_gradients(moving.data, field.data, margins, g,
                                need_moving=moving.requires_grad)
        _accum(field, gf)
        if gm is not None:
            _accum(moving, gm)

    return register_op("warp", (moving, field), out, fwd, bwd)


def warp(ctx: WarpContext) -> Volume:
    """Resample the context's moving patch by its field; output on the field grid."""
    out = warp_array(ctx.moving.voxels, ctx.field.components, ctx.margin)
    return Volume(out.astype(np.float32), ctx.moving.spacing)


def warp_backward(ctx: WarpContext, upstream: np.ndarray):
    """Analytic gradients for a warp evaluated from a context (see warp_gradients)."""
    upstream = np.asarray(upstream)
    if upstream.shape != ctx.field.dims:
        raise ValueError(f"upstream shape {upstream.shape} != field dims {ctx.field.dims}")
    return warp_gradients(ctx.moving.voxels, ctx.field.components, ctx.margin, upstream)
