"""Synthetic paired multimodal phantoms with exact ground-truth deformations.

Each phantom is three smooth-boundary ellipsoidal "organs" on a dark
background, with a smooth tissue texture shared by both renderings. The two
renderings differ the way real modalities do: one maps tissue classes to
intensity monotonically, the other reorders and stretches the soft-tissue
classes, adds a multiplicative bias field, and carries more noise - so
cross-rendering NCC is useless while same-rendering NCC is reliable.

A pair consists of a moving anatomy (the base geometry) and a fixed anatomy
obtained by evaluating the same implicit geometry at displaced coordinates
``x + truth_field(x)``. Pulling the moving image through ``truth_field``
therefore reproduces the fixed image up to resampling, which makes the truth
field the exact target for a registration network, and the paired renderings
of one anatomy are aligned by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volumes import (DisplacementField, LabelMap, Volume,
                      load_field, load_label_map, load_volume,
                      save_field, save_label_map, save_volume)

# Class intensity lookups, index = tissue class 0..3. The first rendering is
# monotone in class; the second reorders the organ classes (class 2 darkest,
# class 1 brightest) on a mid-bright background, so no global monotone map
# connects the two.
CT_CLASS_INTENSITY = (0.15, 0.50, 0.65, 0.88)
MR_CLASS_INTENSITY = (0.45, 0.95, 0.10, 0.70)

MAX_FIELD_DISPLACEMENT = 15.0
BOUNDARY_TAPER_VOXELS = 6
FIELD_BUMPS = 8
MIN_ORGAN_VOXELS = 200


@dataclass(frozen=True)
class RenderConfig:
    """Rendering knobs; zeroing them all yields exact class-lookup images.

    The two modalities respond to the shared tissue field differently: the
    first linearly, the second through a square-type nonlinearity that is
    uncorrelated with the linear response for Gaussian fields. This gives
    every patch intra-modality structure that survives re-rendering while
    contributing nothing to cross-modality correlation.
    """

    noise_sigma_ct: float = 0.02
    noise_sigma_mr: float = 0.03
    bias_amplitude: float = 0.15
    texture_ct: float = 0.07
    texture_mr: float = 0.17


@dataclass(frozen=True, eq=False)
class Anatomy:
    """Label geometry plus a smooth tissue-property modulation field."""

    labels: LabelMap
    tissue: Volume


@dataclass(frozen=True, eq=False)
class PhantomPair:
    fixed_ct: Volume
    paired_mr: Volume
    moving_mr: Volume
    paired_ct: Volume
    truth_field: DisplacementField
    fixed_labels: LabelMap
    moving_labels: LabelMap

    def __post_init__(self):
        dims = self.fixed_ct.dims
        others = (self.paired_mr.dims, self.moving_mr.dims, self.paired_ct.dims,
                  self.truth_field.dims, self.fixed_labels.dims, self.moving_labels.dims)
        if any(d != dims for d in others):
            raise ValueError("phantom pair members disagree on dims")

    @property
    def dims(self):
        return self.fixed_ct.dims


def _smooth_unit_field(rng, dims, sigma):
    """Gaussian-filtered white noise, rescaled to zero mean and unit max-abs."""
    f = gaussian_filter(rng.normal(size=dims), sigma, mode="nearest")
    f -= f.mean()
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


class _AnatomyModel:
    """Implicit phantom geometry, evaluable at arbitrary (fractional) points."""

    def __init__(self, seed, dims):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 48:
            raise ValueError(f"anatomy dims must be >= 48 per axis, got {dims}")
        self.dims = dims
        rng = np.random.default_rng(seed)
        self.wobble = _smooth_unit_field(rng, dims, sigma=6.0)
        self.texture = _smooth_unit_field(rng, dims, sigma=4.0)
        self.texture /= max(self.texture.std(), 1e-12)

        # Loose anatomical arrangement: three jittered anchor sites, kept
        # disjoint by a conservative center-separation test (worst-case
        # ellipsoid extents plus wobble slack).
        min_dim = min(dims)
        anchors = ((0.30, 0.32, 0.33), (0.52, 0.68, 0.46), (0.70, 0.36, 0.68))
        organs = []
        for anchor in anchors:
            placed = False
            for _attempt in range(60):
                radii = rng.uniform(0.125, 0.165, size=3) * min_dim
                amp = rng.uniform(0.08, 0.18)
                center = np.array([
                    a * d + rng.uniform(-0.04, 0.04) * d for a, d in zip(anchor, dims)
                ])
                slack = radii.max() * amp + 2.0
                if any(center[d] - radii[d] - slack < 1 or center[d] + radii[d] + slack > dims[d] - 2
                       for d in range(3)):
                    continue
                ok = True
                for c2, r2, a2 in organs:
                    if np.linalg.norm(center - c2) < radii.max() * (1 + amp) + r2.max() * (1 + a2) + 2.0:
                        ok = False
                        break
                if ok:
                    organs.append((center, radii, amp))
                    placed = True
                    break
            if not placed:
                raise RuntimeError(f"organ placement failed for seed {seed}; use a different seed")
        self.organs = organs

    def _sample_grid(self, grid, pi, pj, pk):
        """Trilinear read of a stored grid at clamped fractional points."""
        vals = 0.0
        idx0 = []
        frac = []
        for p, n in zip((pi, pj, pk), self.dims):
            pc = np.clip(p, 0, n - 1)
            i0 = np.minimum(pc.astype(np.int64), n - 2)
            idx0.append(i0)
            frac.append(pc - i0)
        (i0, j0, k0), (fi, fj, fk) = idx0, frac
        for ci in (0, 1):
            for cj in (0, 1):
                for ck in (0, 1):
                    w = (fi if ci else 1 - fi) * (fj if cj else 1 - fj) * (fk if ck else 1 - fk)
                    vals = vals + w * grid[i0 + ci, j0 + cj, k0 + ck]
        return vals

    def labels_at(self, pi, pj, pk) -> np.ndarray:
        """Tissue class at arbitrary points: crisp, from the implicit surfaces."""
        wob = self._sample_grid(self.wobble, pi, pj, pk)
        labels = np.zeros(np.broadcast(pi, pj, pk).shape, dtype=np.uint8)
        for idx, (center, radii, amp) in enumerate(self.organs, start=1):
            q = ((pi - center[0]) / radii[0]) ** 2 \
                + ((pj - center[1]) / radii[1]) ** 2 \
                + ((pk - center[2]) / radii[2]) ** 2
            inside = (1.0 - q + amp * wob) > 0
            labels[inside] = idx
        return labels

    def texture_at(self, pi, pj, pk) -> np.ndarray:
        return self._sample_grid(self.texture, pi, pj, pk)

    def anatomy_at(self, pi, pj, pk, spacing=(1.0, 1.0, 1.0)) -> Anatomy:
        return Anatomy(
            labels=LabelMap(self.labels_at(pi, pj, pk), spacing),
            tissue=Volume(self.texture_at(pi, pj, pk).astype(np.float32), spacing),
        )


def _identity_points(dims):
    ii = np.arange(dims[0], dtype=np.float64).reshape(-1, 1, 1)
    jj = np.arange(dims[1], dtype=np.float64).reshape(1, -1, 1)
    kk = np.arange(dims[2], dtype=np.float64).reshape(1, 1, -1)
    return np.broadcast_to(ii, dims), np.broadcast_to(jj, dims), np.broadcast_to(kk, dims)


def generate_anatomy(seed, dims) -> Anatomy:
    """Deterministic anatomy: 3 disjoint smooth-boundary organs plus texture."""
    model = _AnatomyModel(seed, dims)
    anatomy = model.anatomy_at(*_identity_points(model.dims))
    counts = np.bincount(anatomy.labels.labels.ravel(), minlength=4)
    scale = anatomy.labels.labels.size / (64 ** 3)
    if any(counts[1:4] < MIN_ORGAN_VOXELS * min(1.0, scale)):
        raise RuntimeError(f"anatomy for seed {seed} produced an undersized organ; use a different seed")
    return anatomy


def render_modalities(anatomy: Anatomy, seed, config: RenderConfig = RenderConfig()):
    """Render one anatomy into the two synthetic modalities, both in [0, 1]."""
    rng = np.random.default_rng(seed)
    labels = anatomy.labels.labels
    tissue = anatomy.tissue.voxels.astype(np.float64)
    dims = labels.shape

    ct = np.asarray(CT_CLASS_INTENSITY)[labels] + config.texture_ct * tissue
    if config.noise_sigma_ct > 0:
        ct = ct + rng.normal(0.0, config.noise_sigma_ct, dims)

    # orthogonal tissue response: E[t * (t^2 - 1)] = 0 for Gaussian t
    mr_tissue = (tissue ** 2 - 1.0) / np.sqrt(2.0)
    mr = np.asarray(MR_CLASS_INTENSITY)[labels] + config.texture_mr * mr_tissue
    if config.bias_amplitude > 0:
        mr = mr * (1.0 + config.bias_amplitude * _smooth_unit_field(rng, dims, sigma=8.0))
    if config.noise_sigma_mr > 0:
        mr = mr + rng.normal(0.0, config.noise_sigma_mr, dims)

    spacing = anatomy.labels.spacing
    return (Volume(np.clip(ct, 0.0, 1.0).astype(np.float32), spacing),
            Volume(np.clip(mr, 0.0, 1.0).astype(np.float32), spacing))


def random_smooth_field(seed, dims, max_disp) -> DisplacementField:
    """Sum of random Gaussian bumps per component, tapered to zero at the
    boundary and rescaled so the peak displacement magnitude equals
    ``max_disp`` (in voxels)."""
    if max_disp < 0 or max_disp > MAX_FIELD_DISPLACEMENT:
        raise ValueError(f"max_disp must be in [0, {MAX_FIELD_DISPLACEMENT}], got {max_disp}")
    dims = tuple(int(d) for d in dims)
    comp = np.zeros((3,) + dims)
    if max_disp == 0:
        return DisplacementField(comp.astype(np.float32))

    rng = np.random.default_rng(seed)
    coords = [np.arange(n, dtype=np.float64) for n in dims]
    for c in range(3):
        for _ in range(FIELD_BUMPS):
            center = [rng.uniform(0.2 * n, 0.8 * n) for n in dims]
            sigma = rng.uniform(6.0, 12.0)
            amp = rng.uniform(-1.0, 1.0)
            gi = np.exp(-((coords[0] - center[0]) ** 2) / (2 * sigma ** 2))
            gj = np.exp(-((coords[1] - center[1]) ** 2) / (2 * sigma ** 2))
            gk = np.exp(-((coords[2] - center[2]) ** 2) / (2 * sigma ** 2))
            comp[c] += amp * gi[:, None, None] * gj[None, :, None] * gk[None, None, :]

    # quadratic taper over the outer shell so displacements die at the edge
    for d, n in enumerate(dims):
        dist = np.minimum(np.arange(n), n - 1 - np.arange(n))
        ramp = (np.minimum(dist, BOUNDARY_TAPER_VOXELS) / BOUNDARY_TAPER_VOXELS) ** 2
        shape = [1, 1, 1]
        shape[d] = n
        comp *= ramp.reshape(shape)

    peak = np.sqrt((comp ** 2).sum(axis=0)).max()
    if peak > 0:
        comp *= max_disp / peak
    return DisplacementField(comp.astype(np.float32))


def _nn_displace(arr: np.ndarray, components: np.ndarray) -> np.ndarray:
    """Nearest-neighbor pull of a grid through a displacement field (clamped)."""
    dims = arr.shape
    pi, pj, pk = _identity_points(dims)
    idx = []
    for p, c, n in zip((pi, pj, pk), components, dims):
        idx.append(np.rint(np.clip(p + c, 0, n - 1)).astype(np.int64))
    return arr[idx[0], idx[1], idx[2]]


def make_phantom_pair(seed, dims, max_disp,
                      config: RenderConfig = RenderConfig()) -> PhantomPair:
    """One training/evaluation pair with an exact ground-truth field.

    The base anatomy is the moving side. The fixed side is the same anatomy
    pulled through ``truth_field``: labels by nearest neighbor, the tissue
    field by trilinear interpolation. Warping the moving side by the truth
    field therefore reproduces the fixed side up to resampling, and the two
    renderings of each side are aligned by construction.
    """
    rng = np.random.default_rng(seed)
    s_anat, s_field, s_fixed, s_moving = rng.integers(0, 2 ** 31, size=4)
    model = _AnatomyModel(s_anat, dims)
    truth = random_smooth_field(s_field, model.dims, max_disp)

    pi, pj, pk = _identity_points(model.dims)
    moving_anat = model.anatomy_at(pi, pj, pk)
    comp = truth.components.astype(np.float64)
    spacing = moving_anat.labels.spacing
    fixed_anat = Anatomy(
        labels=LabelMap(_nn_displace(moving_anat.labels.labels, comp), spacing),
        tissue=Volume(model.texture_at(pi + comp[0], pj + comp[1], pk + comp[2]).astype(np.float32),
                      spacing),
    )

    fixed_ct, paired_mr = render_modalities(fixed_anat, s_fixed, config)
    paired_ct, moving_mr = render_modalities(moving_anat, s_moving, config)
    return PhantomPair(
        fixed_ct=fixed_ct, paired_mr=paired_mr,
        moving_mr=moving_mr, paired_ct=paired_ct,
        truth_field=truth,
        fixed_labels=fixed_anat.labels, moving_labels=moving_anat.labels,
    )


# ---------------------------------------------------------------------------
# Cohort files: one XVOL per member plus a manifest entry per pair.

_PAIR_FILES = ("fixed_ct", "paired_mr", "moving_mr", "paired_ct",
               "truth_field", "fixed_labels", "moving_labels")


def save_pair(pair: PhantomPair, out_dir, stem: str) -> dict:
    """Write all members of a pair below ``out_dir``; returns the file map."""
    files = {}
    for name in _PAIR_FILES:
        path = f"{stem}_{name}.xvol"
        member = getattr(pair, name)
        if name == "truth_field":
            save_field(member, f"{out_dir}/{path}")
        elif name.endswith("labels"):
            save_label_map(member, f"{out_dir}/{path}")
        else:
            save_volume(member, f"{out_dir}/{path}")
        files[name] = path
    return files


def load_pair(entry: dict, base_dir) -> PhantomPair:
    """Inverse of :func:`save_pair` given a manifest entry's file map."""
    files = entry["files"]

    def p(name):
        return f"{base_dir}/{files[name]}"

    return PhantomPair(
        fixed_ct=load_volume(p("fixed_ct")), paired_mr=load_volume(p("paired_mr")),
        moving_mr=load_volume(p("moving_mr")), paired_ct=load_volume(p("paired_ct")),
        truth_field=load_field(p("truth_field")),
        fixed_labels=load_label_map(p("fixed_labels")),
        moving_labels=load_label_map(p("moving_labels")),
    )
