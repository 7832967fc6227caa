"""Case ingestion, normalization, augmentation, splits, and the synthetic
nested-ellipsoid generator used for desk-scale runs.

Labels follow the BraTS convention: 0 background, 1 necrotic/non-enhancing
core, 2 edema, 4 enhancing tumor. Modalities are ordered T1, T1ce, T2,
FLAIR.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    EmptyBrainMask,
    ExtentTooSmall,
    InvalidLabelValue,
    PatchLargerThanVolume,
    ShapeMismatch,
    TooFewCases,
)
from .niftiio import read_nifti, write_nifti

MODALITIES = ("t1", "t1ce", "t2", "flair")
LABEL_VALUES = (0, 1, 2, 4)
_CLASS_OF_LABEL = {0: 0, 1: 1, 2: 2, 4: 3}
_LABEL_OF_CLASS = np.array([0, 1, 2, 4], dtype=np.uint8)


@dataclass
class Volume:
    modalities: np.ndarray  # (4, D, H, W) float32
    spacing: tuple[float, float, float]
    case_id: str = ""

    def __post_init__(self):
        m = self.modalities
        if m.ndim != 4 or m.shape[0] != len(MODALITIES):
            raise ShapeMismatch(f"expected (4, D, H, W), got {m.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ShapeMismatch(f"spacing must be positive, got {self.spacing}")


@dataclass
class LabelMap:
    labels: np.ndarray  # (D, H, W) small ints in {0, 1, 2, 4}
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ShapeMismatch(f"expected (D, H, W), got {self.labels.shape}")
        validate_labels(self.labels)


@dataclass
class SplitPlan:
    folds: list[list[str]]
    seed: int


def validate_labels(grid: np.ndarray) -> None:
    present = np.unique(grid)
    bad = [int(v) for v in present if int(v) not in LABEL_VALUES]
    if bad:
        raise InvalidLabelValue(f"unexpected label values {bad}")


def labels_to_classes(grid: np.ndarray) -> np.ndarray:
    """Map BraTS values {0,1,2,4} onto contiguous class indices {0,1,2,3}."""
    validate_labels(grid)
    out = np.asarray(grid).astype(np.int64)
    out[out == 4] = 3
    return out


def classes_to_labels(classes: np.ndarray) -> np.ndarray:
    return _LABEL_OF_CLASS[np.asarray(classes, dtype=np.int64)]


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def normalize(v: Volume, eps: float = 1e-8) -> Volume:
    """Per-modality z-score over the nonzero (brain) voxels; zeros stay zero."""
    out = np.zeros_like(v.modalities, dtype=np.float32)
    for i in range(v.modalities.shape[0]):
        mod = v.modalities[i]
        mask = mod != 0
        if not mask.any():
            raise EmptyBrainMask(f"modality {MODALITIES[i]} of case {v.case_id!r} is all zero")
        vals = mod[mask].astype(np.float64)
        mean = vals.mean()
        std = max(float(vals.std()), eps)
        out[i][mask] = ((mod[mask] - mean) / std).astype(np.float32)
    return replace(v, modalities=out)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    """Geometric and intensity augmentation ranges with per-op probabilities.

    Angles in degrees, elastic sigma/alpha in voxels, intensity shift as a
    fraction of the per-modality brain std. patch is the crop extent.
    """

    rotate_prob: float = 0.5
    rotate_deg: float = 20.0
    elastic_prob: float = 0.5
    elastic_sigma: float = 10.0
    elastic_alpha: float = 6.0
    flip_prob: float = 0.5
    scale_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    intensity_prob: float = 0.5
    intensity_shift: float = 0.1
    patch: tuple[int, int, int] = (32, 32, 32)


def identity_augment(patch) -> AugmentParams:
    return AugmentParams(
        rotate_prob=0.0, elastic_prob=0.0, flip_prob=0.0,
        scale_prob=0.0, intensity_prob=0.0, patch=tuple(patch),
    )


def _rotation_matrix(angles_rad) -> np.ndarray:
    ax, ay, az = angles_rad
    ca, sa = np.cos(ax), np.sin(ax)
    cb, sb = np.cos(ay), np.sin(ay)
    cc, sc = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _elastic_field(rng, shape, sigma, alpha) -> np.ndarray:
    field_ = np.empty((3, *shape), dtype=np.float64)
    for axis in range(3):
        noise = rng.uniform(-1.0, 1.0, size=shape)
        smooth = ndimage.gaussian_filter(noise, sigma, mode="constant")
        peak = np.abs(smooth).max()
        field_[axis] = 0.0 if peak == 0 else smooth * (alpha / peak)
    return field_


def augment(
    v: Volume, l: LabelMap, rng_seed, params: AugmentParams
) -> tuple[Volume, LabelMap]:
    """Shared geometric transform (trilinear image / nearest labels),
    image-only intensity shift, then a random crop to the patch extent."""
    if v.modalities.shape[1:] != l.labels.shape:
        raise ShapeMismatch("volume and label grids are not aligned")
    shape = l.labels.shape
    if any(p > s for p, s in zip(params.patch, shape)):
        raise PatchLargerThanVolume(f"patch {params.patch} exceeds volume {shape}")

    rng = np.random.default_rng(rng_seed)
    do_rotate = rng.random() < params.rotate_prob
    do_elastic = rng.random() < params.elastic_prob
    do_scale = rng.random() < params.scale_prob
    flips = rng.random(3) < params.flip_prob
    do_intensity = rng.random() < params.intensity_prob

    mods = v.modalities
    labs = l.labels

    if do_rotate or do_elastic or do_scale:
        matrix = np.eye(3)
        if do_rotate:
            angles = np.deg2rad(rng.uniform(-params.rotate_deg, params.rotate_deg, size=3))
            matrix = matrix @ _rotation_matrix(angles)
        if do_scale:
            s = rng.uniform(*params.scale_range)
            matrix = matrix / s
        for axis, f in enumerate(flips):
            if f:
                matrix[:, axis] *= -1.0
        center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
        grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
        coords = np.stack(grids) - center.reshape(3, 1, 1, 1)
        coords = np.tensordot(matrix, coords, axes=([1], [0])) + center.reshape(3, 1, 1, 1)
        if do_elastic:
            coords = coords + _elastic_field(rng, shape, params.elastic_sigma, params.elastic_alpha)
        mods = np.stack(
            [ndimage.map_coordinates(m, coords, order=1, mode="constant", cval=0.0) for m in mods]
        ).astype(np.float32)
        labs = ndimage.map_coordinates(labs, coords, order=0, mode="constant", cval=0)
    elif flips.any():
        # Pure flips stay exact: plain index reversal, no resampling.
        slicer = tuple(slice(None, None, -1) if f else slice(None) for f in flips)
        mods = np.ascontiguousarray(mods[(slice(None), *slicer)])
        labs = np.ascontiguousarray(labs[slicer])

    if do_intensity:
        mods = mods.copy()
        for i in range(mods.shape[0]):
            mask = mods[i] != 0
            if mask.any():
                shift = rng.uniform(-params.intensity_shift, params.intensity_shift)
                mods[i][mask] += np.float32(shift * mods[i][mask].std())

    offsets = [int(rng.integers(0, s - p + 1)) for s, p in zip(shape, params.patch)]
    sl = tuple(slice(o, o + p) for o, p in zip(offsets, params.patch))
    mods = np.ascontiguousarray(mods[(slice(None), *sl)])
    labs = np.ascontiguousarray(labs[sl])
    return replace(v, modalities=mods), replace(l, labels=labs)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def kfold_split(case_ids, k: int = 5, seed: int = 0) -> SplitPlan:
    """Seeded shuffle then round-robin: fold sizes differ by at most one."""
    ids = list(case_ids)
    if len(ids) < k:
        raise TooFewCases(f"{len(ids)} cases for {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = [shuffled[i::k] for i in range(k)]
    return SplitPlan(folds=folds, seed=seed)


# ---------------------------------------------------------------------------
# Synthetic cases
# ---------------------------------------------------------------------------

# Mean intensity per (modality, tissue): background is exactly zero, the
# tumor classes get distinct contrasts in every sequence.
_TISSUE_MEANS = np.array(
    [
        # healthy, necrotic(1), edema(2), enhancing(4)
        [1.00, 0.30, 0.75, 1.45],  # t1
        [1.00, 0.25, 0.90, 3.20],  # t1ce
        [1.00, 1.90, 1.45, 1.10],  # t2
        [1.00, 0.60, 2.10, 1.40],  # flair
    ],
    dtype=np.float64,
)
_NOISE_STD = 0.04


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc += ((g - c) / r) ** 2
    return acc <= 1.0


@dataclass
class SynthGeometry:
    brain_center: np.ndarray
    brain_radii: np.ndarray
    tumor_center: np.ndarray
    edema_radii: np.ndarray
    core_radii: np.ndarray
    enhancing_radii: np.ndarray


def synth_geometry(rng, shape) -> SynthGeometry:
    # Every tumor class gets a sizable voxel population: sliver-sized
    # structures make single-case soft-dice training collapse on them.
    ext = np.asarray(shape, dtype=np.float64)
    brain_center = ext / 2.0 + rng.uniform(-ext / 24.0, ext / 24.0)
    brain_radii = ext * rng.uniform(0.43, 0.47, size=3)
    tumor_center = brain_center + rng.uniform(-ext / 20.0, ext / 20.0)
    edema_radii = brain_radii * rng.uniform(0.74, 0.80, size=3)
    core_radii = np.maximum(edema_radii * rng.uniform(0.78, 0.84, size=3), 3.2)
    enhancing_radii = np.maximum(core_radii * rng.uniform(0.72, 0.78, size=3), 2.2)
    return SynthGeometry(
        brain_center, brain_radii, tumor_center, edema_radii, core_radii, enhancing_radii
    )


def synth_case(seed: int, extent) -> tuple[Volume, LabelMap]:
    """Nested concentric ellipsoids inside a noisy brain ball.

    Enhancing core (4) sits inside the necrotic shell (1) which sits inside
    the edema (2); nesting of the evaluation regions holds by construction.
    """
    shape = (extent, extent, extent) if isinstance(extent, int) else tuple(extent)
    if any(s < 16 for s in shape):
        raise ExtentTooSmall(f"extent {shape} below the 16-voxel minimum")
    rng = np.random.default_rng(seed)
    geo = synth_geometry(rng, shape)

    brain = _ellipsoid_mask(shape, geo.brain_center, geo.brain_radii)
    edema = _ellipsoid_mask(shape, geo.tumor_center, geo.edema_radii) & brain
    core = _ellipsoid_mask(shape, geo.tumor_center, geo.core_radii) & brain
    enhancing = _ellipsoid_mask(shape, geo.tumor_center, geo.enhancing_radii) & brain

    labels = np.zeros(shape, dtype=np.uint8)
    labels[edema] = 2
    labels[core] = 1
    labels[enhancing] = 4

    tissue = np.zeros(shape, dtype=np.int64)  # healthy
    tissue[edema] = 2
    tissue[core] = 1
    tissue[enhancing] = 3
    mods = np.zeros((4, *shape), dtype=np.float32)
    for i in range(4):
        base = _TISSUE_MEANS[i][tissue]
        noisy = base + rng.normal(0.0, _NOISE_STD, size=shape)
        mods[i][brain] = np.maximum(noisy[brain], 1e-3).astype(np.float32)

    spacing = (1.0, 1.0, 1.0)
    return (
        Volume(modalities=mods, spacing=spacing, case_id=f"synth_{seed:04d}"),
        LabelMap(labels=labels, spacing=spacing),
    )


# ---------------------------------------------------------------------------
# Manifests and case IO
# ---------------------------------------------------------------------------


def write_case(case_dir: Path, v: Volume, l: LabelMap) -> dict:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    entry = {"case_id": v.case_id}
    for i, name in enumerate(MODALITIES):
        path = case_dir / f"{name}.nii"
        write_nifti(v.modalities[i].astype(np.float32), v.spacing, path)
        entry[name] = str(path)
    label_path = case_dir / "seg.nii"
    write_nifti(l.labels.astype(np.uint8), l.spacing, label_path)
    entry["label"] = str(label_path)
    return entry


def write_manifest(entries, path) -> None:
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")


def read_manifest(path) -> list[dict]:
    """Load a manifest; relative file paths resolve against its directory."""
    path = Path(path)
    entries = json.loads(path.read_text())
    for entry in entries:
        for key in (*MODALITIES, "label"):
            if key in entry:
                entry[key] = str((path.parent / entry[key]))
    return entries


def load_case(entry: dict) -> tuple[Volume, LabelMap]:
    grids = []
    spacing = None
    for name in MODALITIES:
        grid, spacing = read_nifti(entry[name])
        grids.append(np.asarray(grid, dtype=np.float32))
    mods = np.stack(grids)
    vol = Volume(modalities=mods, spacing=spacing, case_id=entry.get("case_id", ""))
    lab_grid, lab_spacing = read_nifti(entry["label"])
    lab = LabelMap(labels=lab_grid.astype(np.uint8), spacing=lab_spacing)
    return vol, lab


def synth_dataset(out_dir, cases: int, extent: int, seed: int) -> list[dict]:
    """Generate cases, write NIfTI files plus manifest.json, return entries.

    Manifest paths are stored relative to the output directory, so one
    seed yields byte-identical manifests wherever the dataset lands.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx in range(cases):
        v, l = synth_case(seed + idx, extent)
        entry = write_case(out_dir / v.case_id, v, l)
        for key in (*MODALITIES, "label"):
            entry[key] = str(Path(entry[key]).relative_to(out_dir))
        entries.append(entry)
    write_manifest(entries, out_dir / "manifest.json")
    return entries
