import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lvseg.classifier import SliceClass
from lvseg.errors import ImageTooSmall, OutOfRange
from lvseg.features import (DaisyConfig, FeatureVector, build_feature_vector, compute_daisy,
                            inverse_position_index, keypoint_grid, read_features_csv,
                            slice_features, write_features_csv)
from lvseg.volume_io import SliceImage

TOY = DaisyConfig(step=1, radius=2, rings=2, histograms_per_ring=4, orientations=4,
                  gaussian_sigmas=(0.8, 1.3))


def test_ipi_values():
    assert inverse_position_index(1, 13) == 1.0
    assert inverse_position_index(10, 10) == 0.1
    assert inverse_position_index(4, 8) == 0.625


@pytest.mark.parametrize("p,n", [(0, 5), (6, 5), (1, 0)])
def test_ipi_out_of_range(p, n):
    with pytest.raises(OutOfRange):
        inverse_position_index(p, n)


@given(st.integers(1, 40))
def test_ipi_decreases_by_one_over_n(n):
    seq = [inverse_position_index(p, n) for p in range(1, n + 1)]
    assert all(math.isclose(a - b, 1 / n, abs_tol=1e-12) for a, b in zip(seq, seq[1:]))
    assert all(0 < v <= 1 for v in seq)


def test_default_sizes():
    cfg = DaisyConfig()
    assert cfg.descriptor_length == 200
    desc = compute_daisy(SliceImage(np.random.default_rng(0).uniform(0, 255, (200, 200)), 1, 1))
    assert desc.shape == (49, 200)
    fv = build_feature_vector(SliceImage(np.zeros((200, 200)), 1, 4))
    assert len(fv.values) == 9801
    assert fv.values[-1] == 1.0


def test_keypoint_bounds():
    kps = keypoint_grid((200, 200), DaisyConfig())
    assert min(r for r, _ in kps) == 24 and max(r for r, _ in kps) == 174
    assert all(24 <= r <= 200 - 24 - 1 for r, _ in kps)


def test_constant_image_zero_descriptors():
    assert not compute_daisy(np.full((60, 60), 77.0), DaisyConfig(step=10, radius=12,
                                                                  gaussian_sigmas=(1, 2, 3))).any()


def test_too_small():
    with pytest.raises(ImageTooSmall):
        compute_daisy(np.zeros((40, 40)))


def test_config_validation():
    with pytest.raises(ValueError):
        DaisyConfig(radius=2, rings=3)
    with pytest.raises(ValueError):
        DaisyConfig(gaussian_sigmas=(1.0, 2.0))


def test_vectors_differ_only_in_ipi():
    px = np.random.default_rng(4).uniform(0, 255, (200, 200))
    a = build_feature_vector(SliceImage(px, 2, 9)).values
    b = build_feature_vector(SliceImage(px, 7, 9)).values
    assert np.array_equal(a[:-1], b[:-1])
    assert a[-1] == 8 / 9 and b[-1] == 3 / 9


# direct re-implementation of the pooling sums, used as an oracle


def _smooth_direct(img, sigma):
    radius = int(4.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * x * x / sigma ** 2)
    k /= k.sum()
    rows, cols = img.shape
    out = np.zeros_like(img)
    for r in range(rows):
        for c in range(cols):
            acc = 0.0
            for i in range(len(x)):
                for j in range(len(x)):
                    rr = min(max(r + x[i], 0), rows - 1)
                    cc = min(max(c + x[j], 0), cols - 1)
                    acc += k[i] * k[j] * img[rr, cc]
            out[r, c] = acc
    return out


def _daisy_direct(img, cfg):
    rows, cols = img.shape
    gy = np.zeros_like(img)
    gx = np.zeros_like(img)
    for r in range(rows):
        for c in range(cols):
            gy[r, c] = (img[min(r + 1, rows - 1), c] - img[max(r - 1, 0), c]) / 2
            gx[r, c] = (img[r, min(c + 1, cols - 1)] - img[r, max(c - 1, 0)]) / 2
    maps = []
    for o in range(cfg.orientations):
        a = 2 * math.pi * o / cfg.orientations
        maps.append(np.maximum(math.cos(a) * gx + math.sin(a) * gy, 0))
    smoothed = [[_smooth_direct(m, s) for m in maps] for s in cfg.gaussian_sigmas]
    points = [(0, 0, 0)]
    for j in range(cfg.rings):
        rad = cfg.radius * (j + 1) / cfg.rings
        for h in range(cfg.histograms_per_ring):
            a = 2 * math.pi * h / cfg.histograms_per_ring
            points.append((j, round(rad * math.sin(a)), round(rad * math.cos(a))))
    out = []
    for r in range(cfg.radius, rows - cfg.radius, cfg.step):
        for c in range(cfg.radius, cols - cfg.radius, cfg.step):
            hists = []
            for ring, dr, dc in points:
                h = np.array([smoothed[ring][o][r + dr, c + dc] for o in range(cfg.orientations)])
                n = np.linalg.norm(h)
                hists.append(h / n if n >= 1e-12 else np.zeros_like(h))
            d = np.concatenate(hists)
            n = np.linalg.norm(d)
            out.append(d / n if n >= 1e-12 else d)
    return np.array(out)


def test_daisy_matches_direct_pooling():
    img = np.random.default_rng(7).uniform(0, 255, (8, 8))
    assert np.allclose(compute_daisy(img, TOY), _daisy_direct(img, TOY), atol=1e-12)


def _reverse_orientations(desc, cfg):
    """Descriptor of the 180-degree-rotated patch: opposite orientation bins and
    opposite ring positions."""
    o, h = cfg.orientations, cfg.histograms_per_ring
    hist = desc.reshape(-1, o)
    hist = np.roll(hist, o // 2, axis=1)
    out = [hist[0]]
    for j in range(cfg.rings):
        ring = hist[1 + j * h: 1 + (j + 1) * h]
        out.extend(np.roll(ring, h // 2, axis=0))
    return np.concatenate(out)


def test_rotation_by_180_permutes_reversed_descriptors():
    img = np.random.default_rng(8).uniform(0, 255, (8, 8))
    a = _daisy_direct(img, TOY)
    b = compute_daisy(np.rot90(img, 2), TOY)
    # keypoint k of the rotated image sits where keypoint (last - k) was
    expected = np.array([_reverse_orientations(d, TOY) for d in a[::-1]])
    assert np.allclose(b, expected, atol=1e-12)


def test_translation_covariance():
    cfg = DaisyConfig()
    big = np.random.default_rng(9).uniform(0, 255, (200, 275))
    a = compute_daisy(big[:, :250], cfg).reshape(7, 9, -1)
    b = compute_daisy(big[:, 25:], cfg).reshape(7, 9, -1)
    # columns far enough from both borders for the widest smoothing window
    for k in range(2, 6):
        assert np.allclose(b[:, k], a[:, k + 1], atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 255)))
def test_descriptor_values_in_unit_interval(img):
    d = compute_daisy(img, TOY)
    assert np.all(np.isfinite(d))
    assert d.min() >= 0 and d.max() <= 1 + 1e-12
    norms = np.linalg.norm(d, axis=1)
    assert np.all((np.abs(norms - 1) < 1e-9) | (norms == 0))


def test_slice_features_resizes_and_labels():
    slices = [SliceImage(np.random.default_rng(k).uniform(0, 255, (120, 150)), k + 1, 3, "x")
              for k in range(3)]
    labels = [SliceClass.BASAL, SliceClass.MID, SliceClass.APICAL]
    feats = slice_features(slices, labels=labels)
    assert [len(f.values) for f in feats] == [9801] * 3
    assert [f.label for f in feats] == labels
    assert [f.values[-1] for f in feats] == [1.0, 2 / 3, 1 / 3]


def test_features_csv_round_trip(tmp_path):
    feats = [FeatureVector(np.array([0.1, 1 / 3, 2.0]), SliceClass.MID, "c1", 2, 5),
             FeatureVector(np.array([0.0, 1e-17, 0.5]), None, "c2", 1, 1)]
    write_features_csv(tmp_path / "f.csv", feats)
    back = read_features_csv(tmp_path / "f.csv")
    for a, b in zip(feats, back):
        assert np.array_equal(a.values, b.values)
        assert (a.label, a.case_id, a.p, a.n) == (b.label, b.case_id, b.p, b.n)
