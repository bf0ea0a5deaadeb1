"""Dense 3D volumes, label maps, displacement fields, and the XVOL file format.

Index convention everywhere in this package: voxel (i, j, k) with k varying
fastest in memory, i.e. C-contiguous numpy arrays of shape (ni, nj, nk).
Displacement fields are expressed in voxel units. All container types are
immutable after construction and safe to share across workers.

XVOL files are a single UTF-8 JSON header line terminated by '\\n'::

    {"magic": "XVOL1", "dims": [ni, nj, nk], "spacing": [si, sj, sk],
     "dtype": "f32"|"u8", "kind": "intensity"|"label"|"field", "channels": 1|3}

followed immediately by the raw little-endian payload, k fastest, then j,
then i, channel slowest. Field files use dtype f32 with 3 channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

XVOL_MAGIC = "XVOL1"


class FormatError(ValueError):
    """Raised for malformed or inconsistent XVOL files."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Volume:
    """A dense scalar volume: float32 intensities on a regular voxel grid."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise ValueError("volume contains non-finite intensities")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing must be 3 positive floats, got {self.spacing}")
        object.__setattr__(self, "voxels", _freeze(vox))
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-voxel small unsigned integer labels; 0 is background."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValueError(f"label map must be 3D, got shape {lab.shape}")
        if lab.dtype != np.uint8:
            if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
                raise ValueError("label values must fit in uint8")
            lab = lab.astype(np.uint8)
        sp = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in sp):
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "labels", _freeze(lab))
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel 3-component displacement (di, dj, dk) in voxel units.

    ``components`` has shape (3, ni, nj, nk), component slowest.
    ``origin_offset`` locates this field block inside a parent volume grid.
    """

    components: np.ndarray
    origin_offset: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=np.float32)
        if comp.ndim != 4 or comp.shape[0] != 3:
            raise ValueError(f"field must have shape (3, ni, nj, nk), got {comp.shape}")
        if not np.all(np.isfinite(comp)):
            raise ValueError("field contains non-finite components")
        object.__setattr__(self, "components", _freeze(comp))
        object.__setattr__(self, "origin_offset", tuple(int(o) for o in self.origin_offset))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.components.shape[1:]

    def magnitudes(self) -> np.ndarray:
        """Per-voxel Euclidean displacement magnitude."""
        return np.sqrt(np.sum(self.components.astype(np.float64) ** 2, axis=0))


@dataclass(frozen=True)
class PatchSpec:
    """A cubic patch located by its center voxel: covers [center - size//2, ...)."""

    center: tuple[int, int, int]
    size: int

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("patch size must be positive")
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))

    def bounds(self) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        lo = tuple(c - self.size // 2 for c in self.center)
        hi = tuple(l + self.size for l in lo)
        return lo, hi

    def check_within(self, dims: tuple[int, int, int]) -> None:
        lo, hi = self.bounds()
        if any(l < 0 for l in lo) or any(h > d for h, d in zip(hi, dims)):
            raise ValueError(f"patch {lo}..{hi} exceeds volume dims {dims}")


# ---------------------------------------------------------------------------
# XVOL I/O

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _write_xvol(path, payload: np.ndarray, dims, spacing, dtype: str, kind: str, channels: int):
    header = {
        "magic": XVOL_MAGIC,
        "dims": [int(d) for d in dims],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "kind": kind,
        "channels": channels,
    }
    raw = np.ascontiguousarray(payload, dtype=_DTYPES[dtype])
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        f.write(raw.tobytes())


def _read_xvol(path):
    path = Path(path)
    with open(path, "rb") as f:
        line = f.readline(1 << 16)
        if not line.endswith(b"\n"):
            raise FormatError(f"{path}: missing header line")
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad header ({e})") from e
        if not isinstance(header, dict) or header.get("magic") != XVOL_MAGIC:
            raise FormatError(f"{path}: not an XVOL file")
        try:
            dims = tuple(int(d) for d in header["dims"])
            spacing = tuple(float(s) for s in header["spacing"])
            dtype = header["dtype"]
            kind = header["kind"]
            channels = int(header["channels"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: incomplete header ({e})") from e
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise FormatError(f"{path}: bad dims {dims}")
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: unsupported dtype {dtype!r}")
        if channels not in (1, 3):
            raise FormatError(f"{path}: unsupported channel count {channels}")
        count = channels * dims[0] * dims[1] * dims[2]
        raw = f.read()
    expected = count * _DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape((channels,) + dims if channels > 1 else dims)
    return header, dims, spacing, dtype, kind, data


def save_volume(v: Volume, path) -> None:
    """Write a Volume as an XVOL intensity file."""
    _write_xvol(path, v.voxels, v.dims, v.spacing, "f32", "intensity", 1)


def load_volume(path) -> Volume:
    """Read an XVOL intensity file back into a Volume."""
    _, dims, spacing, dtype, kind, data = _read_xvol(path)
    if kind != "intensity" or dtype != "f32":
        raise FormatError(f"{path}: expected f32 intensity volume, got {dtype}/{kind}")
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return Volume(data, spacing)


def save_label_map(m: LabelMap, path) -> None:
    _write_xvol(path, m.labels, m.dims, m.spacing, "u8", "label", 1)


def load_label_map(path) -> LabelMap:
    _, dims, spacing, dtype, kind, data = _read_xvol(path)
    if kind != "label" or dtype != "u8":
        raise FormatError(f"{path}: expected u8 label map, got {dtype}/{kind}")
    return LabelMap(data, spacing)


def save_field(f: DisplacementField, path, spacing=(1.0, 1.0, 1.0)) -> None:
    _write_xvol(path, f.components, f.dims, spacing, "f32", "field", 3)


def load_field(path) -> DisplacementField:
    _, dims, spacing, dtype, kind, data = _read_xvol(path)
    if kind != "field" or dtype != "f32" or data.shape[0] != 3:
        raise FormatError(f"{path}: expected 3-channel f32 field, got {dtype}/{kind}")
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return DisplacementField(data)


# ---------------------------------------------------------------------------
# Geometry operations (all pure: inputs are never mutated)


def extract_patch(v: Volume, spec: PatchSpec) -> Volume:
    """Copy the cubic sub-volume described by ``spec``; spacing is inherited."""
    spec.check_within(v.dims)
    lo, hi = spec.bounds()
    block = v.voxels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    return Volume(block.copy(), v.spacing)


def crop(v: Volume, lo, hi) -> Volume:
    """Copy the half-open box [lo, hi) out of ``v``."""
    lo = tuple(int(x) for x in lo)
    hi = tuple(int(x) for x in hi)
    if any(l < 0 or l >= h for l, h in zip(lo, hi)) or any(h > d for h, d in zip(hi, v.dims)):
        raise ValueError(f"invalid crop box {lo}..{hi} for dims {v.dims}")
    return Volume(v.voxels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy(), v.spacing)


def flip_x(v: Volume) -> Volume:
    """Mirror along the first axis: voxel (i, j, k) -> (ni-1-i, j, k)."""
    return Volume(v.voxels[::-1].copy(), v.spacing)


def flip_x_labels(m: LabelMap) -> LabelMap:
    return LabelMap(m.labels[::-1].copy(), m.spacing)


def flip_x_field(f: DisplacementField) -> DisplacementField:
    """Mirror a displacement field along i; the i component changes sign."""
    comp = f.components[:, ::-1].copy()
    comp[0] = -comp[0]
    return DisplacementField(comp, f.origin_offset)
