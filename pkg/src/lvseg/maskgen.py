"""LV seed-mask construction.

A slice is brightened with the mean-dependent gain ``alpha = 100 / (2 x)``
plus an offset ``beta``, thresholded at several intensity quantiles, and the
8-connected components are scored by circularity, closeness to the image
centre and closeness to the previous slice's LV centroid.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .classifier import SliceClass
from .errors import EmptyMask, ZeroIntensity
from .volume_io import SliceImage

EIGHT = np.ones((3, 3), dtype=bool)
APICAL_STOP_AREA = 120


@dataclass(frozen=True)
class MaskgenConfig:
    betas: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0, 40.0)
    quantiles: tuple[float, ...] = (0.80, 0.85, 0.90, 0.95)
    min_area: int = 30
    max_area: int = 4000
    weights: tuple[float, float, float] = (1.0, 2.0, 3.0)
    beam: int = 5
    max_pair_distance: float = 20.0


@dataclass
class RegionProps:
    area: int
    centroid: tuple[float, float]
    perimeter: int
    circularity: float
    eccentricity: float
    bbox: tuple[int, int, int, int]


@dataclass
class Candidate:
    mask: np.ndarray
    props: RegionProps
    score: float
    beta: float
    threshold: float


@dataclass
class SeedSelection:
    masks: list[np.ndarray | None]
    consistent: bool
    centroids: list[tuple[float, float] | None] = field(default_factory=list)


def adjust_intensity(s: SliceImage | np.ndarray, beta: float = 0.0, clamp: bool = True) -> np.ndarray:
    pixels = s.pixels if isinstance(s, SliceImage) else np.asarray(s, dtype=np.float64)
    x = float(pixels.mean())
    if x <= 1e-9:
        raise ZeroIntensity(f"mean intensity {x} is not positive")
    out = pixels * (100.0 / (2.0 * x)) + beta
    return np.clip(out, 0.0, 255.0) if clamp else out


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT)


def _perimeter(component: np.ndarray) -> int:
    padded = np.pad(component, 1).astype(np.int8)
    return int(np.abs(np.diff(padded, axis=0)).sum() + np.abs(np.diff(padded, axis=1)).sum())


def component_props(component: np.ndarray) -> RegionProps:
    rows, cols = np.nonzero(component)
    area = len(rows)
    cr, cc = rows.mean(), cols.mean()
    perimeter = _perimeter(component)
    # pixels are unit squares: each contributes 1/12 of variance on both axes
    mrr = ((rows - cr) ** 2).mean() + 1 / 12
    mcc = ((cols - cc) ** 2).mean() + 1 / 12
    mrc = ((rows - cr) * (cols - cc)).mean()
    half_gap = np.sqrt(((mrr - mcc) / 2) ** 2 + mrc ** 2)
    major = (mrr + mcc) / 2 + half_gap
    minor = (mrr + mcc) / 2 - half_gap
    eccentricity = float(np.sqrt(max(0.0, 1.0 - minor / major)))
    return RegionProps(
        area=area,
        centroid=(float(cr), float(cc)),
        perimeter=perimeter,
        circularity=4 * np.pi * area / perimeter ** 2,
        eccentricity=eccentricity,
        bbox=(int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1),
    )


def region_properties(mask: np.ndarray) -> list[RegionProps]:
    labels, count = label_components(mask)
    if count == 0:
        raise EmptyMask("region_properties of an empty mask")
    return [component_props(labels == k) for k in range(1, count + 1)]


def candidate_score(props: RegionProps, shape: tuple[int, int],
                    prev_centroid: tuple[float, float] | None,
                    weights=(1.0, 2.0, 3.0)) -> float:
    w1, w2, w3 = weights
    diag = float(np.hypot(*shape))
    center = ((shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0)
    score = w1 * props.circularity - w2 * np.hypot(props.centroid[0] - center[0],
                                                   props.centroid[1] - center[1]) / diag
    if prev_centroid is not None:
        score -= w3 * np.hypot(props.centroid[0] - prev_centroid[0],
                               props.centroid[1] - prev_centroid[1]) / diag
    return float(score)


def lv_candidates(s: SliceImage, prev_centroid=None, cfg: MaskgenConfig = MaskgenConfig()) -> list[Candidate]:
    """Every gated component over the beta schedule and threshold sweep, best first.

    The sort is stable, so equal scores keep sweep order (beta, then quantile,
    then component label).
    """
    out = []
    for beta in cfg.betas:
        try:
            adjusted = adjust_intensity(s, beta)
        except ZeroIntensity:
            return []
        for t in np.quantile(adjusted, cfg.quantiles):
            labels, count = label_components(adjusted >= t)
            if count == 0:
                continue
            areas = np.bincount(labels.ravel(), minlength=count + 1)
            for k in np.flatnonzero((areas >= cfg.min_area) & (areas <= cfg.max_area)):
                if k == 0:
                    continue
                comp = labels == k
                props = component_props(comp)
                out.append(Candidate(comp, props,
                                     candidate_score(props, comp.shape, prev_centroid, cfg.weights),
                                     float(beta), float(t)))
    out.sort(key=lambda c: -c.score)
    return out


def select_lv_mask(s: SliceImage, prev_centroid=None,
                   cfg: MaskgenConfig = MaskgenConfig()) -> np.ndarray | None:
    """Best-scoring candidate mask, or ``None`` when nothing passes the area gate."""
    cands = lv_candidates(s, prev_centroid, cfg)
    return cands[0].mask if cands else None


def _distinct(cands: list[Candidate], k: int) -> list[Candidate]:
    seen, out = [], []
    for c in cands:
        if any(np.array_equal(c.mask, m) for m in seen):
            continue
        seen.append(c.mask)
        out.append(c)
        if len(out) == k:
            break
    return out


def sequential_seed_masks(first_slices: list[SliceImage],
                          cfg: MaskgenConfig = MaskgenConfig()) -> SeedSelection:
    """Jointly pick masks for the first three slices with mutually close centroids.

    ``consistent`` is False when no triple satisfies the pairwise distance
    bound; the masks then come from independent per-slice selection.
    """
    beams = [_distinct(lv_candidates(s, None, cfg), cfg.beam) for s in first_slices]
    best, best_cost = None, np.inf
    if all(beams):
        for triple in itertools.product(*beams):
            cents = [np.array(c.props.centroid) for c in triple]
            dists = [np.linalg.norm(a - b) for a, b in itertools.combinations(cents, 2)]
            if max(dists) > cfg.max_pair_distance:
                continue
            cost = sum(dists)
            if cost < best_cost:
                best, best_cost = triple, cost
    if best is not None:
        return SeedSelection([c.mask for c in best], True, [c.props.centroid for c in best])
    masks, cents = [], []
    for beam in beams:
        masks.append(beam[0].mask if beam else None)
        cents.append(beam[0].props.centroid if beam else None)
    return SeedSelection(masks, False, cents)


def shrink_mask(m: np.ndarray, cls: SliceClass, fraction: float | None = None,
                apical_stop_area: int = APICAL_STOP_AREA) -> np.ndarray:
    """Erode with a 3x3 square until the class-specific stop rule fires.

    Basal and mid masks stop once their area is at most ``fraction`` (default
    0.5) of the original. Apical masks stop as soon as the area drops below
    ``apical_stop_area``. No class ever erodes to an empty mask.
    """
    m = np.asarray(m, dtype=bool)
    if not m.any():
        raise EmptyMask("cannot shrink an empty mask")
    if fraction is None:
        fraction = 0.0 if cls is SliceClass.APICAL else 0.5
    original = int(m.sum())
    current = m
    while True:
        area = int(current.sum())
        if area <= fraction * original:
            return current
        if cls is SliceClass.APICAL and area < apical_stop_area:
            return current
        nxt = ndimage.binary_erosion(current, structure=EIGHT, border_value=0)
        if not nxt.any():
            return current
        current = nxt
