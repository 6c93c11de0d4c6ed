"""Dense DAISY descriptors and the per-slice feature vector."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .classifier import SliceClass
from .errors import ImageTooSmall, IoFailure, OutOfRange
from .volume_io import SliceImage, resize_bilinear

WORKING_SIZE = (200, 200)
_NORM_GUARD = 1e-12


@dataclass(frozen=True)
class DaisyConfig:
    step: int = 25
    radius: int = 24
    rings: int = 3
    histograms_per_ring: int = 8
    orientations: int = 8
    gaussian_sigmas: tuple[float, ...] = (2.5, 5.0, 7.5)

    def __post_init__(self):
        if self.step < 1 or min(self.rings, self.histograms_per_ring, self.orientations) < 1:
            raise ValueError("DAISY step and counts must be >= 1")
        if self.radius < self.rings:
            raise ValueError("DAISY radius must be >= rings")
        if len(self.gaussian_sigmas) != self.rings:
            raise ValueError("need one Gaussian sigma per ring")

    @property
    def descriptor_length(self) -> int:
        return (self.rings * self.histograms_per_ring + 1) * self.orientations


@dataclass
class FeatureVector:
    values: np.ndarray
    label: SliceClass | None = None
    case_id: str = ""
    p: int = 1
    n: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


def inverse_position_index(p: int, n: int) -> float:
    if n < 1 or not 1 <= p <= n:
        raise OutOfRange(f"slice position {p} outside 1..{n}")
    return (n - p + 1) / n


def keypoint_grid(shape: tuple[int, int], cfg: DaisyConfig) -> list[tuple[int, int]]:
    rows = range(cfg.radius, shape[0] - cfg.radius, cfg.step)
    cols = range(cfg.radius, shape[1] - cfg.radius, cfg.step)
    return [(r, c) for r in rows for c in cols]


def sample_offsets(cfg: DaisyConfig) -> list[tuple[int, int, int]]:
    """(ring, d_row, d_col) for every pooling point; ring 0 is the centre."""
    out = [(0, 0, 0)]
    for j in range(cfg.rings):
        ring_radius = cfg.radius * (j + 1) / cfg.rings
        for h in range(cfg.histograms_per_ring):
            angle = 2 * np.pi * h / cfg.histograms_per_ring
            out.append((j + 1, int(np.round(ring_radius * np.sin(angle))),
                        int(np.round(ring_radius * np.cos(angle)))))
    return out


def gradients(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with a replicated border; returns (d/drow, d/dcol)."""
    padded = np.pad(np.asarray(pixels, dtype=np.float64), 1, mode="edge")
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    return gy, gx


def orientation_maps(pixels: np.ndarray, orientations: int) -> np.ndarray:
    """Positive directional derivatives, one plane per orientation bin."""
    gy, gx = gradients(pixels)
    angles = 2 * np.pi * np.arange(orientations) / orientations
    maps = np.cos(angles)[:, None, None] * gx + np.sin(angles)[:, None, None] * gy
    return np.maximum(maps, 0.0)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(norm < _NORM_GUARD, 0.0, v / np.where(norm < _NORM_GUARD, 1.0, norm))


def compute_daisy(s: SliceImage | np.ndarray, cfg: DaisyConfig = DaisyConfig()) -> np.ndarray:
    """Descriptors as an ``(n_keypoints, descriptor_length)`` array, keypoints row-major."""
    pixels = s.pixels if isinstance(s, SliceImage) else np.asarray(s, dtype=np.float64)
    keypoints = keypoint_grid(pixels.shape, cfg)
    if not keypoints:
        raise ImageTooSmall(f"no DAISY keypoint fits a {pixels.shape} image with radius {cfg.radius}")
    maps = orientation_maps(pixels, cfg.orientations)
    # centre pooling shares the first ring's smoothing
    smoothed = [
        np.stack([ndimage.gaussian_filter(m, sigma, mode="nearest") for m in maps], axis=-1)
        for sigma in cfg.gaussian_sigmas
    ]
    kp = np.array(keypoints)
    hists = []
    for ring, dr, dc in sample_offsets(cfg):
        layer = smoothed[max(ring - 1, 0)]
        hists.append(layer[kp[:, 0] + dr, kp[:, 1] + dc])
    desc = _unit(np.stack(hists, axis=1))  # (keypoints, points, orientations)
    return _unit(desc.reshape(len(keypoints), -1))


def build_feature_vector(s: SliceImage, cfg: DaisyConfig = DaisyConfig(),
                         label: SliceClass | None = None) -> FeatureVector:
    desc = compute_daisy(s, cfg)
    values = np.append(desc.ravel(), inverse_position_index(s.p, s.n))
    return FeatureVector(values, label, s.case_id, s.p, s.n)


def slice_features(slices: list[SliceImage], cfg: DaisyConfig = DaisyConfig(),
                   size: tuple[int, int] = WORKING_SIZE,
                   labels: list[SliceClass] | None = None) -> list[FeatureVector]:
    out = []
    for k, s in enumerate(slices):
        if s.shape != tuple(size):
            s = resize_bilinear(s, *size)
        out.append(build_feature_vector(s, cfg, labels[k] if labels else None))
    return out


def write_features_csv(path: str | Path, features: list[FeatureVector]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            dim = len(features[0].values) if features else 0
            writer.writerow(["case_id", "p", "n", "label"] + [f"f{i}" for i in range(dim)])
            for f in features:
                writer.writerow([f.case_id, f.p, f.n, f.label.value if f.label else ""]
                                + [repr(float(v)) for v in f.values])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_features_csv(path: str | Path) -> list[FeatureVector]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            out = []
            for row in reader:
                label = SliceClass.parse(row[3]) if row[3] else None
                out.append(FeatureVector(np.array(row[4:], dtype=np.float64), label,
                                         row[0], int(row[1]), int(row[2])))
            return out
    except (OSError, StopIteration) as exc:
        raise IoFailure(f"cannot read features from {path}: {exc}") from exc
