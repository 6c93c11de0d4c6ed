"""Local Gaussian distribution fitting active contour.

The level set ``phi`` is positive inside the contour. For the inside
(``i = 1``) and outside (``i = 2``) regions, local means ``u_i`` and variances
``var_i`` are Gaussian-window averages weighted by ``H(phi)`` and
``1 - H(phi)``. The fitting energy of pixel ``x`` against region ``i`` is

    e_i(x) = sum_y w(y - x) [log sqrt(2 pi var_i(y)) + (u_i(y) - I(x))^2 / (2 var_i(y))]

and the evolution is the explicit gradient flow of

    E = l1 sum e1 H + l2 sum e2 (1 - H) + nu sum |grad H| + mu sum (|grad phi| - 1)^2 / 2

All window sums use a normalised Gaussian truncated at ``ceil(4 sigma)`` and
treat pixels outside the image as absent.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .classifier import CLASS_ORDER, SliceClass
from .errors import EmptyMask, NonFiniteField
from .maskgen import EIGHT, label_components
from .volume_io import SliceImage

GRAD_FLOOR = 1e-10
DENOM_FLOOR = 1e-12
ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class LgdParams:
    tau: float = 0.05
    lambda1: float = 3.0
    lambda2: float = 2.0
    nu: float = 0.0008 * 255 * 255
    mu: float = 1.0
    epsilon: float = 1.0
    kernel_sigma: float = 3.0
    iterations: int | str = 150
    sigma_floor: float = 1e-4 * 255 * 255
    # mid-ventricle rule: iterations = clamp(round(gain * local std), lo, hi)
    adaptive_gain: float = 4.0
    adaptive_min: int = 20
    adaptive_max: int = 300
    adaptive_radius: float = 10.0

    def __post_init__(self):
        if min(self.tau, self.lambda1, self.lambda2, self.epsilon,
               self.kernel_sigma, self.sigma_floor) <= 0:
            raise ValueError("tau, lambdas, epsilon, kernel_sigma and sigma_floor must be positive")
        if self.nu < 0 or self.mu < 0:
            raise ValueError("nu and mu must be nonnegative")
        if self.iterations != ADAPTIVE and int(self.iterations) < 0:
            raise ValueError("iterations must be >= 0 or 'adaptive'")


SET_A = LgdParams(lambda1=3.0, lambda2=2.0, nu=0.0008 * 255 * 255, iterations=150)
SET_B = LgdParams(lambda1=3.5, lambda2=2.5, nu=0.0005 * 255 * 255, iterations=ADAPTIVE)
SET_C = LgdParams(lambda1=1.75, lambda2=1.5, nu=0.0005 * 255 * 255, iterations=30)
NAMED_SETS = {"A": SET_A, "B": SET_B, "C": SET_C}
DEFAULT_SHRINK = {SliceClass.BASAL: 0.8, SliceClass.MID: 0.9, SliceClass.APICAL: 0.0}


@dataclass
class ParameterRegistry:
    params: dict[SliceClass, LgdParams] = field(default_factory=lambda: {
        SliceClass.BASAL: SET_A, SliceClass.MID: SET_B, SliceClass.APICAL: SET_C})
    names: dict[SliceClass, str] = field(default_factory=lambda: {
        SliceClass.BASAL: "A", SliceClass.MID: "B", SliceClass.APICAL: "C"})
    # seed shrink target as a fraction of the selected mask's area
    shrink: dict[SliceClass, float] = field(default_factory=lambda: dict(DEFAULT_SHRINK))

    def __post_init__(self):
        missing = [c.value for c in CLASS_ORDER if c not in self.params]
        if missing:
            raise ValueError(f"parameter registry lacks classes {missing}")
        for c in CLASS_ORDER:
            if not 0.0 <= self.shrink.setdefault(c, DEFAULT_SHRINK[c]) <= 1.0:
                raise ValueError("shrink targets must lie in [0, 1]")

    def uniform(self, params: LgdParams, name: str) -> "ParameterRegistry":
        """Same parameters for every class; shrink targets are kept."""
        return ParameterRegistry({c: params for c in CLASS_ORDER},
                                 {c: name for c in CLASS_ORDER}, dict(self.shrink))

    def to_dict(self) -> dict:
        return {c.value: {"name": self.names.get(c, ""), "shrink": self.shrink[c],
                          **asdict(self.params[c])}
                for c in CLASS_ORDER}

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterRegistry":
        params, names, shrink = {}, {}, {}
        for key, value in data.items():
            c = SliceClass.parse(key)
            value = dict(value)
            names[c] = value.pop("name", "")
            if "shrink" in value:
                shrink[c] = float(value.pop("shrink"))
            params[c] = LgdParams(**value)
        return cls(params, names, {**DEFAULT_SHRINK, **shrink})


def params_for(cls: SliceClass, registry: ParameterRegistry | None = None) -> LgdParams:
    return (registry or ParameterRegistry()).params[cls]


@dataclass
class SegmentationResult:
    mask: np.ndarray
    iterations_run: int
    initial_energy: float
    final_energy: float
    hull_applied: bool
    params: LgdParams | None = None


# ---------------------------------------------------------------------------
# numerics


def _as_pixels(img):
    return img.pixels if isinstance(img, SliceImage) else np.asarray(img, dtype=np.float64)


def heaviside(z, eps: float = 1.0):
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(np.asarray(z) / eps))


def dirac(z, eps: float = 1.0):
    return eps / (np.pi * (eps * eps + np.asarray(z) ** 2))


def gaussian_kernel(sigma: float) -> np.ndarray:
    half = int(math.ceil(4 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def window_sum(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable Gaussian window over the last two axes, zero outside the image."""
    out = ndimage.correlate1d(arr, kernel, axis=-2, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, kernel, axis=-1, mode="constant", cval=0.0)


def _stats_from_sums(sums: np.ndarray, floor: float):
    # sums rows: w*M, w*(I M), w*(I^2 M)
    den = np.maximum(sums[0], DENOM_FLOOR)
    u = sums[1] / den
    var = sums[2] / den - 2 * u * sums[1] / den + u * u
    return u, np.maximum(var, floor)


def base_sums(img, kernel: np.ndarray) -> np.ndarray:
    """Window sums of 1, I and I^2; independent of phi, so computed once per image."""
    return window_sum(np.stack([np.ones_like(img), img, img * img]), kernel)


def local_gaussian_stats(img, phi, p: LgdParams, kernel: np.ndarray | None = None,
                         base: np.ndarray | None = None):
    """Local means and variances ``(u1, u2, var1, var2)``."""
    img = _as_pixels(img)
    kernel = gaussian_kernel(p.kernel_sigma) if kernel is None else kernel
    base = base_sums(img, kernel) if base is None else base
    h = heaviside(phi, p.epsilon)
    inside = window_sum(np.stack([h, img * h, img * img * h]), kernel)
    u1, v1 = _stats_from_sums(inside, p.sigma_floor)
    u2, v2 = _stats_from_sums(base - inside, p.sigma_floor)
    return u1, u2, v1, v2


def fitting_energies(img, u1, u2, v1, v2, kernel: np.ndarray):
    """Pointwise data terms ``(e1, e2)`` via the window-sum expansion."""
    stack = []
    for u, v in ((u1, v1), (u2, v2)):
        inv = 1.0 / (2.0 * v)
        stack += [0.5 * np.log(2 * np.pi * v), inv, u * inv, u * u * inv]
    s = window_sum(np.stack(stack), kernel)
    e1 = s[0] + img * img * s[1] - 2 * img * s[2] + s[3]
    e2 = s[4] + img * img * s[5] - 2 * img * s[6] + s[7]
    return e1, e2


def _pad(a):
    return np.pad(a, 1, mode="edge")


def grad(phi):
    """Central differences with replicated border; returns (d/drow, d/dcol)."""
    q = _pad(phi)
    return (q[2:, 1:-1] - q[:-2, 1:-1]) / 2.0, (q[1:-1, 2:] - q[1:-1, :-2]) / 2.0


def curvature(phi):
    gy, gx = grad(phi)
    norm = np.maximum(np.hypot(gx, gy), GRAD_FLOOR)
    ny, _ = grad(gy / norm)
    _, nx = grad(gx / norm)
    return nx + ny


def laplacian(phi):
    q = _pad(phi)
    return q[2:, 1:-1] + q[:-2, 1:-1] + q[1:-1, 2:] + q[1:-1, :-2] - 4 * phi


def _energy(phi, h, e1, e2, p: LgdParams) -> float:
    hy, hx = grad(h)
    gy, gx = grad(phi)
    data = p.lambda1 * np.sum(e1 * h) + p.lambda2 * np.sum(e2 * (1 - h))
    length = np.sum(np.hypot(hx, hy))
    reg = 0.5 * np.sum((np.hypot(gx, gy) - 1) ** 2)
    return float(data + p.nu * length + p.mu * reg)


def lgd_energy(img, phi, p: LgdParams) -> float:
    img = _as_pixels(img)
    kernel = gaussian_kernel(p.kernel_sigma)
    u1, u2, v1, v2 = local_gaussian_stats(img, phi, p, kernel)
    e1, e2 = fitting_energies(img, u1, u2, v1, v2, kernel)
    return _energy(phi, heaviside(phi, p.epsilon), e1, e2, p)


def region_force(img, u1, u2, v1, v2, p: LgdParams, kernel: np.ndarray) -> np.ndarray:
    """``l1 e1 - l2 e2`` with the two expansions merged into three window sums."""
    a1, a2 = 1.0 / (2.0 * v1), 1.0 / (2.0 * v2)
    const = (p.lambda1 * (0.5 * np.log(2 * np.pi * v1) + u1 * u1 * a1)
             - p.lambda2 * (0.5 * np.log(2 * np.pi * v2) + u2 * u2 * a2))
    s = window_sum(np.stack([const, p.lambda1 * a1 - p.lambda2 * a2,
                             p.lambda1 * u1 * a1 - p.lambda2 * u2 * a2]), kernel)
    return s[0] + img * img * s[1] - 2 * img * s[2]


def evolve_level_set(img, phi0, p: LgdParams, iters: int,
                     trace: list[float] | None = None) -> np.ndarray:
    """Run ``iters`` explicit Euler steps from ``phi0``.

    When ``trace`` is given, the energy before every step and after the last
    one is appended to it (this costs roughly one extra step per iteration).
    """
    img = _as_pixels(img)
    phi = np.array(phi0, dtype=np.float64, copy=True)
    kernel = gaussian_kernel(p.kernel_sigma)
    base = base_sums(img, kernel)
    for _ in range(int(iters)):
        phi = _step(img, phi, p, kernel, base, trace)
        if not np.all(np.isfinite(phi)):
            raise NonFiniteField("level set diverged; try a smaller time step")
    if trace is not None:
        trace.append(lgd_energy(img, phi, p))
    return phi


def _step(img, phi, p: LgdParams, kernel, base, trace):
    # overflow here just means divergence, which the caller reports
    with np.errstate(over="ignore", invalid="ignore"):
        u1, u2, v1, v2 = local_gaussian_stats(img, phi, p, kernel, base)
        if trace is not None:
            e1, e2 = fitting_energies(img, u1, u2, v1, v2, kernel)
            trace.append(_energy(phi, heaviside(phi, p.epsilon), e1, e2, p))
        delta = dirac(phi, p.epsilon)
        kappa = curvature(phi)
        force = (-delta * region_force(img, u1, u2, v1, v2, p, kernel)
                 + p.nu * delta * kappa + p.mu * (laplacian(phi) - kappa))
        return phi + p.tau * force


def init_level_set(seed, c: float = 2.0) -> np.ndarray:
    seed = np.asarray(seed, dtype=bool)
    if not seed.any():
        raise EmptyMask("cannot initialise a level set from an empty seed")
    if c <= 0:
        raise ValueError("initial height must be positive")
    return np.where(seed, c, -c).astype(np.float64)


def mid_iteration_count(img, seed_centroid, p: LgdParams = SET_B) -> int:
    img = _as_pixels(img)
    rr, cc = np.ogrid[: img.shape[0], : img.shape[1]]
    disc = (rr - seed_centroid[0]) ** 2 + (cc - seed_centroid[1]) ** 2 <= p.adaptive_radius ** 2
    sigma = float(img[disc].std()) if disc.any() else 0.0
    return int(min(max(round(p.adaptive_gain * sigma), p.adaptive_min), p.adaptive_max))


# ---------------------------------------------------------------------------
# convex hull


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def hull_vertices(points) -> list[tuple[int, int]]:
    """Monotone-chain convex hull, counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points).tolist())))
    if len(pts) <= 2:
        return pts
    lower, upper = [], []
    for pt in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], pt) <= 0:
            lower.pop()
        lower.append(pt)
    for pt in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], pt) <= 0:
            upper.pop()
        upper.append(pt)
    return lower[:-1] + upper[:-1]


def convex_hull_fill(m) -> np.ndarray:
    """All pixels whose centres lie inside or on the hull of the foreground centres."""
    m = np.asarray(m, dtype=bool)
    if not m.any():
        raise EmptyMask("convex hull of an empty mask")
    pts = np.argwhere(m)
    hull = hull_vertices(pts)
    r0, c0 = pts.min(axis=0)
    r1, c1 = pts.max(axis=0)
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    inside = np.ones(rr.shape, dtype=bool)
    if len(hull) == 2:
        (ar, ac), (br, bc) = hull
        inside &= (br - ar) * (cc - ac) - (bc - ac) * (rr - ar) == 0
    elif len(hull) > 2:
        for (ar, ac), (br, bc) in zip(hull, hull[1:] + hull[:1]):
            inside &= (br - ar) * (cc - ac) - (bc - ac) * (rr - ar) >= 0
    out = m.copy()
    out[r0 : r1 + 1, c0 : c1 + 1] |= inside
    return out


# ---------------------------------------------------------------------------
# per-slice driver


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = label_components(mask)
    if count <= 1:
        return mask.astype(bool)
    areas = np.bincount(labels.ravel())
    areas[0] = 0
    return labels == int(np.argmax(areas))


def iteration_count(img, seed, p: LgdParams) -> int:
    if p.iterations == ADAPTIVE:
        rows, cols = np.nonzero(seed)
        return mid_iteration_count(img, (rows.mean(), cols.mean()), p)
    return int(p.iterations)


def roi_bounds(seed: np.ndarray, margin: int | None):
    if margin is None:
        return (0, seed.shape[0], 0, seed.shape[1])
    rows, cols = np.nonzero(seed)
    return (max(rows.min() - margin, 0), min(rows.max() + margin + 1, seed.shape[0]),
            max(cols.min() - margin, 0), min(cols.max() + margin + 1, seed.shape[1]))


def segment_slice(s, seed, cls: SliceClass, registry: ParameterRegistry | None = None,
                  init_height: float = 4.0, roi_margin: int | None = 24,
                  params: LgdParams | None = None,
                  trace: list[float] | None = None) -> SegmentationResult:
    """Evolve a contour from ``seed`` with the parameter set for ``cls``.

    The seed region is evolved on the ``lambda2`` side of the energy (the
    field starts at ``-init_height`` inside the seed), so with
    ``lambda1 > lambda2`` the contour grows out of a shrunk seed until local
    statistics stop it. Evolution runs on the seed's bounding box padded by
    ``roi_margin`` pixels (``None`` uses the whole slice); energies refer to
    that window. ``params`` overrides the registry lookup; the convex-hull
    step always follows the slice class. ``trace`` collects per-step
    energies as in :func:`evolve_level_set`.
    """
    img = _as_pixels(s)
    seed = np.asarray(seed, dtype=bool)
    p = params or params_for(cls, registry)
    iters = iteration_count(img, seed, p)
    r0, r1, c0, c1 = roi_bounds(seed, roi_margin)
    window = img[r0:r1, c0:c1]
    phi0 = -init_level_set(seed[r0:r1, c0:c1], init_height)
    phi = evolve_level_set(window, phi0, p, iters, trace)
    mask = np.zeros(img.shape, dtype=bool)
    mask[r0:r1, c0:c1] = phi < 0
    mask = largest_component(mask)
    hull = cls is SliceClass.MID and mask.any()
    if hull:
        mask = convex_hull_fill(mask)
    return SegmentationResult(mask, iters, lgd_energy(window, phi0, p),
                              lgd_energy(window, phi, p), hull, p)
