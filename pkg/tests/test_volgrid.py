import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from oneshotseg.volgrid import (
    FormatError,
    LabelGrid,
    PhantomConfig,
    PhantomError,
    ScribbleSet,
    Volume3,
    crop_patch,
    draw_support_scribble,
    generate_phantom,
    load_labels,
    load_scribbles,
    load_volume,
    normalize_intensity,
    save_labels,
    save_scribbles,
    save_volume,
)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomConfig(), 0)


def test_phantom_deterministic():
    cfg = PhantomConfig()
    (v1, g1), (v2, g2) = generate_phantom(cfg, 3), generate_phantom(cfg, 3)
    assert v1.data.tobytes() == v2.data.tobytes()
    assert g1.labels.tobytes() == g2.labels.tobytes()


def test_phantom_subjects_differ():
    cfg = PhantomConfig()
    assert not np.array_equal(generate_phantom(cfg, 1)[1].labels, generate_phantom(cfg, 2)[1].labels)


def test_phantom_without_deformation_or_noise_identical():
    cfg = PhantomConfig(deform_amplitude=0.0, noise_sigma=0.0)
    (v1, g1), (v2, g2) = generate_phantom(cfg, 1), generate_phantom(cfg, 7)
    assert np.array_equal(v1.data, v2.data)
    assert np.array_equal(g1.labels, g2.labels)


def test_phantom_organ_fractions_in_bounds(phantom):
    cfg = PhantomConfig()
    _, gt = phantom
    lo, hi = cfg.organ_fraction_bounds
    for cls in range(1, cfg.class_count):
        assert lo <= gt.binary(cls).mean() <= hi


def test_phantom_organ_intensity_matches_offset(phantom):
    cfg = PhantomConfig()
    v, gt = phantom
    tol = 4 * cfg.noise_sigma
    for cls in range(1, cfg.class_count):
        mean = v.data[gt.binary(cls)].mean()
        assert abs(mean - (cfg.body_intensity + cfg.organ_offsets[cls - 1])) < tol


def test_phantom_infeasible_raises():
    with pytest.raises(PhantomError):
        generate_phantom(PhantomConfig(organ_count=5), 0)
    with pytest.raises(PhantomError):
        generate_phantom(PhantomConfig(shape=(4, 8, 8), organ_fraction_bounds=(0.5, 0.9)), 0)


def test_phantom_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(organ_count=0)
    with pytest.raises(ValueError):
        PhantomConfig(deform_amplitude=-1.0)


def test_normalize_examples():
    v = Volume3(np.array([2.0, 4.0, 6.0]).reshape(1, 1, 3))
    assert np.allclose(normalize_intensity(v).data.ravel(), [0.0, 0.5, 1.0])
    u = Volume3(np.array([0.0, 0.25, 1.0]).reshape(1, 3, 1))
    assert np.array_equal(normalize_intensity(u).data, u.data)
    c = Volume3(np.full((2, 2, 2), 7.0))
    assert np.all(normalize_intensity(c).data == 0)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False, width=32), min_size=2, max_size=27))
def test_normalize_range(values):
    v = Volume3(np.array(values).reshape(1, 1, -1))
    out = normalize_intensity(v).data
    assert out.min() >= 0 and out.max() <= 1


def test_crop_identity_and_padding():
    data = np.arange(4 * 6 * 8, dtype=np.float32).reshape(4, 6, 8)
    v = Volume3(data)
    full = crop_patch(v, (2, 3, 4), (4, 6, 8))
    assert np.array_equal(full, data)
    corner = crop_patch(v, (0, 0, 0), (4, 4, 4))
    assert corner.shape == (4, 4, 4)
    assert np.array_equal(corner[2:, 2:, 2:], data[:2, :2, :2])
    assert np.all(corner[:2] == 0) and np.all(corner[:, :2] == 0) and np.all(corner[:, :, :2] == 0)
    assert np.array_equal(crop_patch(v, (1, 2, 3), (3, 3, 3)), crop_patch(v, (1, 2, 3), (3, 3, 3)))


def test_crop_center_convention():
    data = np.zeros((5, 5, 5), np.float32)
    data[2, 3, 1] = 1
    p = crop_patch(Volume3(data), (2, 3, 1), (4, 4, 4))
    assert p[2, 2, 2] == 1


def test_crop_errors():
    v = Volume3(np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        crop_patch(v, (4, 0, 0), (2, 2, 2))
    with pytest.raises(ValueError):
        crop_patch(v, (0, 0, 0), (9, 2, 2))


@given(
    st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8)),
    st.integers(0, 2**31),
)
def test_crop_reembed_reproduces_volume(shape, size, seed):
    size = tuple(min(s, 2 * n) for s, n in zip(size, shape))
    r = np.random.default_rng(seed)
    data = r.normal(size=shape).astype(np.float32)
    center = tuple(int(r.integers(n)) for n in shape)
    patch = crop_patch(Volume3(data), center, size)
    start = np.array(center) - np.array(size) // 2
    for idx in np.ndindex(*size):
        src = start + idx
        if np.all(src >= 0) and np.all(src < shape):
            assert patch[idx] == data[tuple(src)]
        else:
            assert patch[idx] == data.min()


def test_volume_roundtrip(tmp_path, rng):
    v = Volume3(rng.normal(size=(3, 4, 5)), (3.0, 0.5, 1.25))
    save_volume(tmp_path / "a.vol3", v)
    meta = json.loads((tmp_path / "a.vol3.json").read_text())
    assert meta == {"shape": [3, 4, 5], "spacing": [3.0, 0.5, 1.25], "dtype": "f32"}
    w = load_volume(tmp_path / "a.vol3")
    assert w.data.tobytes() == v.data.tobytes() and w.spacing == v.spacing
    assert (tmp_path / "a.vol3").stat().st_size == 3 * 4 * 5 * 4


def test_volume_length_mismatch(tmp_path):
    np.zeros(500, "<f4").tofile(tmp_path / "b.vol3")
    (tmp_path / "b.vol3.json").write_text(json.dumps({"shape": [8, 8, 8], "spacing": [1, 1, 1], "dtype": "f32"}))
    with pytest.raises(FormatError):
        load_volume(tmp_path / "b.vol3")


def test_volume_malformed_sidecar(tmp_path):
    np.zeros(8, "<f4").tofile(tmp_path / "c.vol3")
    (tmp_path / "c.vol3.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_volume(tmp_path / "c.vol3")
    (tmp_path / "c.vol3.json").write_text(json.dumps({"shape": [2, 2, 2], "spacing": [1, -1, 1], "dtype": "f32"}))
    with pytest.raises(FormatError):
        load_volume(tmp_path / "c.vol3")


def test_labels_roundtrip(tmp_path, rng):
    g = LabelGrid(rng.integers(0, 3, (4, 5, 6)), 3, (2.0, 1.0, 1.0))
    save_labels(tmp_path / "g.labels", g)
    h = load_labels(tmp_path / "g.labels")
    assert np.array_equal(h.labels, g.labels) and h.class_count == 3 and h.spacing == g.spacing


def test_scribble_roundtrip_and_bounds(tmp_path):
    s = ScribbleSet(np.array([[0, 1, 2], [3, 3, 3]]), np.array([0, 2]), 3)
    save_scribbles(tmp_path / "s.json", s)
    t = load_scribbles(tmp_path / "s.json")
    assert np.array_equal(t.coords, s.coords) and np.array_equal(t.labels, s.labels) and t.class_count == 3
    with pytest.raises(FormatError):
        load_scribbles(tmp_path / "s.json", shape=(3, 3, 3))
    save_scribbles(tmp_path / "u.json", s, shape=(3, 3, 3))
    with pytest.raises(FormatError):
        load_scribbles(tmp_path / "u.json")


def test_scribble_label_range():
    with pytest.raises(ValueError):
        ScribbleSet(np.zeros((1, 3)), np.array([3]), 3)


def test_support_scribble_properties(phantom):
    _, gt = phantom
    for cls in (1, 2):
        s = draw_support_scribble(gt, cls, 12, np.random.default_rng(cls))
        fg = s.of_class(cls)
        assert len(fg) == 12
        assert np.all(gt.labels[tuple(fg.T)] == cls)
        # at least one voxel inside the boundary
        interior = ndimage.binary_erosion(gt.binary(cls), ndimage.generate_binary_structure(3, 3))
        assert np.all(interior[tuple(fg.T)])
        # connected polyline: consecutive points are 26-neighbours
        assert np.all(np.abs(np.diff(fg, axis=0)).max(axis=1) == 1)
        bg = s.of_class(0)
        assert len(bg) == 12 and np.all(gt.labels[tuple(bg.T)] == 0)


def test_support_scribble_single_point_and_determinism(phantom):
    _, gt = phantom
    s = draw_support_scribble(gt, 1, 1, np.random.default_rng(0), bg_points=0)
    assert len(s) == 1 and gt.labels[tuple(s.coords[0])] == 1
    a = draw_support_scribble(gt, 2, 8, np.random.default_rng(5))
    b = draw_support_scribble(gt, 2, 8, np.random.default_rng(5))
    assert np.array_equal(a.coords, b.coords)


def test_support_scribble_too_small(phantom):
    _, gt = phantom
    with pytest.raises(ValueError):
        draw_support_scribble(gt, 2, 100000, np.random.default_rng(0))
    with pytest.raises(ValueError):
        draw_support_scribble(gt, 0, 4, np.random.default_rng(0))
