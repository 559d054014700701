import filecmp
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfcn.pnm import PNMError, read_pnm, write_pnm
from sfcn.synth import (
    SCENE_LABELS,
    SceneParams,
    generate_dataset,
    generate_scene,
    load_dataset,
    mask_from_file,
    mask_to_file,
    quantize,
    read_manifest,
)


def scanline_inside(quad, y, x):
    """Point-in-trapezoid for one pixel centre by scalar interpolation."""
    (blx, bly), (brx, _), (trx, tly), (tlx, _) = quad
    cy, cx = y + 0.5, x + 0.5
    if cy < tly:
        return False
    t = (bly - cy) / (bly - tly)
    left = blx + (tlx - blx) * t
    right = brx + (trx - brx) * t
    return left <= cx <= right


def test_determinism():
    p = SceneParams(seed=3)
    a, b = generate_scene(p, 5), generate_scene(p, 5)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert a.label == b.label
    c = generate_scene(p, 6)
    assert not np.array_equal(a.image, c.image)


@pytest.mark.parametrize("index", range(6))
def test_unoccluded_mask_is_trapezoid(index):
    p = SceneParams(seed=11, occluders=(0, 0))
    s = generate_scene(p, index)
    quad = s.meta["quad"]
    for y in range(p.size):
        for x in range(p.size):
            assert bool(s.mask[y, x]) == scanline_inside(quad, y, x), (y, x)


def test_clean_road_colour():
    p = SceneParams(seed=2, noise=0.0, shadows=(0, 0), lane_markings=False)
    for i in range(5):
        s = generate_scene(p, i)
        road = s.mask == 1
        for c in range(3):
            assert (s.image[0, c][road] == p.road_color[c]).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 10_000))
def test_sample_invariants(seed, index):
    s = generate_scene(SceneParams(seed=seed), index)
    assert s.image.shape == (1, 3, 64, 64)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert 0.05 <= (s.mask == 1).mean() <= 0.8
    assert not (s.mask[s.meta["occluded"]] == 1).any()
    assert s.label in SCENE_LABELS
    assert set(np.unique(s.mask)) <= {0, 1}


def test_param_validation():
    with pytest.raises(ValueError):
        SceneParams(size=50)
    with pytest.raises(ValueError):
        SceneParams(occluders=(3, 1))
    with pytest.raises(ValueError):
        SceneParams(base_width=(0.0, 0.5))
    with pytest.raises(ValueError):
        SceneParams(vp_jitter=(-0.6, 0.1))
    with pytest.raises(ValueError):
        SceneParams(noise=-1)


def test_larger_extent():
    s = generate_scene(SceneParams(size=128), 0)
    assert s.image.shape == (1, 3, 128, 128)


def test_mask_file_codes():
    m = np.array([[0, 1, 255]], dtype=np.uint8)
    raw = mask_to_file(m)
    np.testing.assert_array_equal(raw, [[0, 255, 128]])
    np.testing.assert_array_equal(mask_from_file(raw), m)
    with pytest.raises(PNMError):
        mask_from_file(np.array([[7]], dtype=np.uint8))


def test_single_pair(tmp_path):
    path = generate_dataset(SceneParams(), 1, tmp_path)
    entries = read_manifest(path)
    assert len(entries) == 1
    assert len(os.listdir(tmp_path / "manifest_images")) == 1
    assert len(os.listdir(tmp_path / "manifest_masks")) == 1
    first = open(path).readline()
    assert "seed=7" in first


def test_round_trip(tmp_path):
    p = SceneParams(seed=4)
    path = generate_dataset(p, 3, tmp_path)
    loaded = load_dataset(path)
    assert len(loaded) == len(read_manifest(path)) == 3
    for i, s in enumerate(loaded):
        q = quantize(generate_scene(p, i))
        np.testing.assert_array_equal(s.image, q.image)
        np.testing.assert_array_equal(s.mask, q.mask)
        assert s.label == q.label
        raw = read_pnm(s.meta["image_path"])
        np.testing.assert_array_equal(raw.transpose(2, 0, 1)[None] / 255.0, s.image)


def test_byte_identical_reruns(tmp_path):
    for d in ("a", "b"):
        generate_dataset(SceneParams(seed=9), 2, tmp_path / d)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files
    for sub in ("manifest_images", "manifest_masks"):
        for f in os.listdir(tmp_path / "a" / sub):
            assert filecmp.cmp(tmp_path / "a" / sub / f, tmp_path / "b" / sub / f, shallow=False)
    assert filecmp.cmp(tmp_path / "a" / "manifest.tsv", tmp_path / "b" / "manifest.tsv", shallow=False)


def test_manifest_errors(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(SceneParams(), 0, tmp_path)
    empty = tmp_path / "empty.tsv"
    empty.write_text("# nothing\n")
    with pytest.raises(ValueError):
        load_dataset(empty)
    bad = tmp_path / "bad.tsv"
    bad.write_text("a.ppm\tb.pgm\n")
    with pytest.raises(ValueError):
        read_manifest(bad)
    missing = tmp_path / "missing.tsv"
    missing.write_text("a.ppm\tb.pgm\tuu\n")
    with pytest.raises(FileNotFoundError):
        load_dataset(missing)


def test_malformed_image_header(tmp_path):
    path = generate_dataset(SceneParams(), 1, tmp_path)
    img = read_manifest(path)[0].image
    with open(img, "wb") as fh:
        fh.write(b"P3\n2 2\n255\n")
    with pytest.raises(PNMError):
        load_dataset(path)


def test_pnm_round_trip(tmp_path, rng):
    gray = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    colour = rng.integers(0, 256, (4, 3, 3)).astype(np.uint8)
    write_pnm(tmp_path / "g.pgm", gray)
    write_pnm(tmp_path / "c.ppm", colour)
    np.testing.assert_array_equal(read_pnm(tmp_path / "g.pgm"), gray)
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.ppm"), colour)
    (tmp_path / "h.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(read_pnm(tmp_path / "h.pgm"), [[1, 2]])
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(PNMError):
        read_pnm(tmp_path / "t.pgm")
    (tmp_path / "d.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x01")
    with pytest.raises(PNMError):
        read_pnm(tmp_path / "d.pgm")
