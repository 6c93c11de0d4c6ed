"""Synthetic short-axis studies with exact ground truth.

Basal slices hold an elliptical bright cavity, mid slices a circular cavity
with a dark papillary notch touching its wall, apical slices a small disc.
Every cavity is wrapped in a dark myocardial ring on a mid-grey background.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import SliceClass
from .errors import InvalidSpec
from .volume_io import CmrVolume, GroundTruthMask, write_slice_directory

# phantom intensities live on 0..255; voxels are stored on the 16-bit PGM scale
INTENSITY_SCALE = 257.0
MAX_STEP = 2.5
MYOCARDIUM_WIDTH = 8.0
APICAL_MAX_AREA = 120


@dataclass
class PhantomSpec:
    n_slices: int = 10
    image_size: tuple[int, int] = (200, 200)
    noise_sigma: float = 8.0
    basal_fraction: float = 0.3
    mid_fraction: float = 0.5
    apical_fraction: float = 0.2
    cavity_intensity: float = 200.0
    myocardium_intensity: float = 30.0
    background_intensity: float = 60.0
    seed: int = 0

    def validate(self) -> None:
        fractions = (self.basal_fraction, self.mid_fraction, self.apical_fraction)
        if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
            raise InvalidSpec(f"class fractions must be nonnegative and sum to 1, got {fractions}")
        if self.n_slices < 3:
            raise InvalidSpec("a phantom study needs at least 3 slices")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be nonnegative")
        rows, cols = self.image_size
        if rows < 64 or cols < 64:
            raise InvalidSpec("phantom images must be at least 64x64")
        for name in ("cavity_intensity", "myocardium_intensity", "background_intensity"):
            if not 0 <= getattr(self, name) <= 255:
                raise InvalidSpec(f"{name} must lie in [0, 255]")


@dataclass
class PhantomStudy:
    volume: CmrVolume
    ground_truth: list[GroundTruthMask]
    classes: list[SliceClass]
    notch: np.ndarray  # (row, col, slice) papillary notch pixels

    def __iter__(self):
        return iter((self.volume, self.ground_truth, self.classes))


def class_counts(spec: PhantomSpec) -> tuple[int, int, int]:
    """Largest-remainder apportionment of ``n_slices`` over the class fractions."""
    fractions = np.array([spec.basal_fraction, spec.mid_fraction, spec.apical_fraction])
    raw = fractions * spec.n_slices
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for k in order[: spec.n_slices - counts.sum()]:
        counts[k] += 1
    return tuple(int(c) for c in counts)


def _ellipse(rr, cc, center, a, b, theta):
    dr, dc = rr - center[0], cc - center[1]
    u = dc * np.cos(theta) + dr * np.sin(theta)
    v = -dc * np.sin(theta) + dr * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _disc(rr, cc, center, r):
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= r * r


def _centers(rng, n, size):
    start = np.array([(size[0] - 1) / 2.0, (size[1] - 1) / 2.0]) + rng.uniform(-5, 5, 2)
    steps = rng.uniform(0, MAX_STEP, n - 1)
    angles = rng.uniform(0, 2 * np.pi, n - 1)
    moves = np.stack([steps * np.sin(angles), steps * np.cos(angles)], axis=1)
    return np.vstack([start, start + np.cumsum(moves, axis=0)])


def generate_phantom_study(spec: PhantomSpec, case_id: str | None = None) -> PhantomStudy:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rows, cols = spec.image_size
    n = spec.n_slices
    n_basal, n_mid, n_apical = class_counts(spec)
    classes = ([SliceClass.BASAL] * n_basal + [SliceClass.MID] * n_mid
               + [SliceClass.APICAL] * n_apical)
    centers = _centers(rng, n, spec.image_size)
    scale = min(rows, cols) / 200.0
    theta = rng.uniform(0, np.pi)
    rr, cc = np.mgrid[0:rows, 0:cols].astype(np.float64)

    image = np.empty((rows, cols, n))
    gt = np.zeros((rows, cols, n), dtype=bool)
    notch = np.zeros((rows, cols, n), dtype=bool)
    for k, cls in enumerate(classes):
        center = centers[k]
        wall = MYOCARDIUM_WIDTH * scale
        if cls is SliceClass.BASAL:
            a = scale * (32.0 - 1.5 * k + rng.uniform(-1, 1))
            b = a / 1.4
            cavity = _ellipse(rr, cc, center, a, b, theta)
            outer = _ellipse(rr, cc, center, a + wall, b + wall, theta)
            hole = np.zeros_like(cavity)
        elif cls is SliceClass.MID:
            j = k - n_basal
            r = scale * (20.0 - 7.0 * j / max(n_mid - 1, 1) + rng.uniform(-0.5, 0.5))
            cavity = _disc(rr, cc, center, r)
            outer = _disc(rr, cc, center, r + wall)
            rn = rng.uniform(2.0, 4.0)
            phi = rng.uniform(0, 2 * np.pi)
            nc = center + (r - rn) * np.array([np.sin(phi), np.cos(phi)])
            hole = _disc(rr, cc, nc, rn) & cavity
        else:
            r = rng.uniform(4.0, 5.5)
            cavity = _disc(rr, cc, center, r)
            outer = _disc(rr, cc, center, r + wall + 1.0)
            hole = np.zeros_like(cavity)
        plane = np.full((rows, cols), float(spec.background_intensity))
        plane[outer] = spec.myocardium_intensity
        plane[cavity] = spec.cavity_intensity
        plane[hole] = spec.myocardium_intensity
        if spec.noise_sigma > 0:
            plane = plane + rng.normal(0.0, spec.noise_sigma, plane.shape)
        image[:, :, k] = plane
        gt[:, :, k] = cavity
        notch[:, :, k] = hole

    voxels = np.rint(np.clip(image, 0, 255) * INTENSITY_SCALE)
    case_id = case_id or f"phantom_{spec.seed}"
    volume = CmrVolume(case_id, voxels, spacing_mm=(1.0, 1.0, 10.0),
                       labels=[c.value for c in classes])
    masks = [GroundTruthMask(gt[:, :, k], k + 1, n, case_id) for k in range(n)]
    return PhantomStudy(volume, masks, classes, notch)


def write_phantom_study(directory: str | Path, study: PhantomStudy) -> Path:
    gt = np.stack([m.pixels for m in study.ground_truth], axis=2)
    return write_slice_directory(directory, study.volume, gt)


def generate_dataset(out: str | Path, cases: int, spec: PhantomSpec | None = None) -> list[Path]:
    """Write ``cases`` phantom studies under ``out``; case ``i`` uses seed ``spec.seed + i``."""
    base = spec or PhantomSpec()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(cases):
        spec_i = PhantomSpec(**{**base.__dict__, "seed": base.seed + i})
        study = generate_phantom_study(spec_i, case_id=f"case_{i + 1:03d}")
        paths.append(write_phantom_study(out / f"case_{i + 1:03d}", study))
    return paths
