import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from lvseg.classifier import CLASS_ORDER, SliceClass
from lvseg.errors import InvalidSpec
from lvseg.lgdacm import convex_hull_fill
from lvseg.maskgen import component_props
from lvseg.phantom import (INTENSITY_SCALE, PhantomSpec, class_counts, generate_dataset,
                           generate_phantom_study)
from lvseg.volume_io import load_volume


def test_deterministic():
    a = generate_phantom_study(PhantomSpec(seed=7))
    b = generate_phantom_study(PhantomSpec(seed=7))
    assert a.volume.voxels.tobytes() == b.volume.voxels.tobytes()
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.ground_truth, b.ground_truth))
    assert a.classes == b.classes
    c = generate_phantom_study(PhantomSpec(seed=8))
    assert a.volume.voxels.tobytes() != c.volume.voxels.tobytes()


def test_noise_free_cavity_intensity():
    spec = PhantomSpec(noise_sigma=0.0, seed=2)
    st_ = generate_phantom_study(spec)
    for k, gt in enumerate(st_.ground_truth):
        plane = st_.volume.voxels[:, :, k] / INTENSITY_SCALE
        cavity = gt.pixels & ~st_.notch[:, :, k]
        assert np.all(plane[cavity] == spec.cavity_intensity)
        assert np.all(plane[st_.notch[:, :, k]] == spec.myocardium_intensity)


def test_class_layout(phantom):
    assert len(phantom.classes) == 10
    assert [CLASS_ORDER.index(c) for c in phantom.classes] == sorted(
        CLASS_ORDER.index(c) for c in phantom.classes)
    assert class_counts(PhantomSpec()) == (3, 5, 2)


def test_apical_area_bound(phantom):
    for gt, cls in zip(phantom.ground_truth, phantom.classes):
        if cls is SliceClass.APICAL:
            assert gt.pixels.sum() < 120


def test_basal_axis_ratio(phantom):
    for gt, cls in zip(phantom.ground_truth, phantom.classes):
        if cls is SliceClass.BASAL:
            rows, cols = np.nonzero(gt.pixels)
            ev = np.linalg.eigvalsh(np.cov(np.stack([rows, cols])))
            assert np.sqrt(ev[1] / ev[0]) == pytest.approx(1.4, abs=0.1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 16))
def test_structure_invariants(seed, n):
    study = generate_phantom_study(PhantomSpec(seed=seed, n_slices=n))
    assert len(study.classes) == n
    order = [CLASS_ORDER.index(c) for c in study.classes]
    assert order == sorted(order)
    cents = []
    for gt, cls in zip(study.ground_truth, study.classes):
        m = gt.pixels
        assert ndimage.label(m, structure=np.ones((3, 3)))[1] == 1
        if cls is SliceClass.MID:
            assert np.array_equal(convex_hull_fill(m), m)
        cents.append(np.array(component_props(m).centroid))
    for a, b in zip(cents, cents[1:]):
        assert np.linalg.norm(a - b) <= 3


@pytest.mark.parametrize("kwargs", [dict(basal_fraction=0.5), dict(n_slices=2),
                                    dict(noise_sigma=-1), dict(image_size=(32, 200)),
                                    dict(cavity_intensity=300)])
def test_invalid_spec(kwargs):
    with pytest.raises(InvalidSpec):
        generate_phantom_study(PhantomSpec(**kwargs))


def test_dataset_on_disk(tmp_path):
    paths = generate_dataset(tmp_path, 2, PhantomSpec(n_slices=4, seed=5))
    assert [p.name for p in paths] == ["case_001", "case_002"]
    vol = load_volume(paths[1])
    again = generate_phantom_study(PhantomSpec(n_slices=4, seed=6))
    assert np.array_equal(vol.voxels, again.volume.voxels)
