import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partseg.annotation import point_paths, validate_annotation
from partseg.errors import FormatError, InvalidArgumentError, InvalidDataError
from partseg.geometry import (PointCloud, SyntheticShapeSpec, furthest_point_sample, generate_synthetic,
                              normalize, read_cloud, read_pnpc, read_xyz, write_pnpc, write_xyz)
from partseg.template import builtin_template

coords = arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)),
                elements=st.floats(-100, 100, allow_nan=False))


def line_cloud(xs):
    return PointCloud("line", np.array([[x, 0.0, 0.0] for x in xs]))


# ---------------------------------------------------------------- FPS

def test_fps_hand_example():
    assert furthest_point_sample(line_cloud([0, 10, 1, 9]), 3).tolist() == [0, 1, 2]


def test_fps_tie_goes_to_lowest_index():
    # 1 and 2 are both at distance 5 from the seed
    assert furthest_point_sample(line_cloud([0, 5, -5, 1]), 2).tolist() == [0, 1]


@pytest.mark.parametrize("k", [0, 5, -1])
def test_fps_rejects_bad_k(k):
    with pytest.raises(InvalidArgumentError):
        furthest_point_sample(line_cloud([0, 1, 2, 3]), k)


@given(coords)
def test_fps_full_is_permutation_and_one_is_seed(pts):
    cloud = PointCloud("c", pts)
    n = len(pts)
    assert sorted(furthest_point_sample(cloud, n).tolist()) == list(range(n))
    assert furthest_point_sample(cloud, 1).tolist() == [0]


def _greedy_reference(pts, k):
    chosen = [0]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(len(pts)):
            if i in chosen:
                continue
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


@given(coords, st.integers(1, 30))
def test_fps_matches_greedy_rule(pts, k):
    k = min(k, len(pts))
    assert furthest_point_sample(PointCloud("c", pts), k).tolist() == _greedy_reference(pts, k)


@given(arrays(np.float64, (25, 3), elements=st.floats(-10, 10, allow_nan=False)))
def test_fps_min_distance_non_increasing(pts):
    idx = furthest_point_sample(PointCloud("c", pts), 25)
    prev = np.inf
    for k in range(2, 26):
        sel = pts[idx[:k]]
        d = np.sqrt(((sel[:, None] - sel[None]) ** 2).sum(-1))
        m = d[np.triu_indices(k, 1)].min()
        assert m <= prev + 1e-12
        prev = m


# ---------------------------------------------------------------- normalize

def test_normalize_examples():
    out = normalize(PointCloud("a", [[2, 0, 0], [-2, 0, 0]]))
    assert np.allclose(out.points, [[1, 0, 0], [-1, 0, 0]])
    one = normalize(PointCloud("b", [[3, 4, 5]]))
    assert np.array_equal(one.points, [[0, 0, 0]])


@given(coords)
def test_normalize_unit_max_norm(pts):
    out = normalize(PointCloud("c", pts)).points
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-9)
    r = np.sqrt((out**2).sum(axis=1)).max()
    spread = np.ptp(pts, axis=0).max()
    if spread > 1e-6:
        assert abs(r - 1.0) < 1e-12


def test_point_cloud_invariants():
    with pytest.raises(InvalidDataError):
        PointCloud("x", np.zeros((0, 3)))
    with pytest.raises(InvalidDataError):
        PointCloud("x", [[0, 0, np.nan]])
    with pytest.raises(InvalidDataError):
        PointCloud("x", np.zeros((3, 2)))


# ---------------------------------------------------------------- formats

def test_pnpc_roundtrip_and_layout(tmp_path):
    pts = np.array([[0.5, -1.25, 2.0], [3.0, 4.0, 5.5]])
    p = tmp_path / "c.pnpc"
    write_pnpc(PointCloud("c", pts), p)
    raw = p.read_bytes()
    assert raw[:4] == b"PNPC"
    assert struct.unpack("<I", raw[4:8])[0] == 2
    assert struct.unpack("<6f", raw[8:]) == tuple(pts.reshape(-1))
    back = read_cloud(p)
    assert back.shape_id == "c"
    assert np.array_equal(back.points, pts)


def test_pnpc_errors(tmp_path):
    p = tmp_path / "bad.pnpc"
    p.write_bytes(b"XXXX" + struct.pack("<I", 1) + b"\0" * 12)
    with pytest.raises(FormatError) as e:
        read_pnpc(p)
    assert e.value.offset == 0
    p.write_bytes(b"PNPC" + struct.pack("<I", 2) + b"\0" * 12)
    with pytest.raises(FormatError):
        read_pnpc(p)


def test_xyz_roundtrip_and_errors(tmp_path):
    pts = np.random.default_rng(0).normal(size=(5, 3))
    p = tmp_path / "c.xyz"
    write_xyz(PointCloud("c", pts), p)
    assert np.array_equal(read_cloud(p).points, pts)
    p.write_text("1 2 3\n4 5\n")
    with pytest.raises(FormatError) as e:
        read_xyz(p)
    assert e.value.line == 2


# ---------------------------------------------------------------- generator

@pytest.mark.parametrize("category", ["chair", "lamp"])
def test_generator_deterministic_and_valid(category):
    spec = SyntheticShapeSpec(category, seed=7, points_per_shape=512)
    c1, a1 = generate_synthetic(spec)
    c2, a2 = generate_synthetic(spec)
    assert np.array_equal(c1.points, c2.points)
    assert a1.to_dict() == a2.to_dict()
    assert len(c1.points) == 512
    assert validate_annotation(a1, builtin_template(category)) == []


@pytest.mark.parametrize("category", ["chair", "lamp"])
def test_generator_every_point_in_one_leaf(category):
    t = builtin_template(category)
    for seed in range(30):
        cloud, ann = generate_synthetic(SyntheticShapeSpec(category, seed, 256))
        assert validate_annotation(ann, t) == []
        paths = point_paths(ann)
        assert all(len(p) >= 2 for p in paths)


def test_generator_errors():
    with pytest.raises(InvalidArgumentError):
        generate_synthetic(SyntheticShapeSpec("table", 0))
    with pytest.raises(InvalidArgumentError):
        generate_synthetic(SyntheticShapeSpec("chair", 0, points_per_shape=3))


def test_generator_covers_both_base_types():
    kinds = set()
    for seed in range(40):
        _, ann = generate_synthetic(SyntheticShapeSpec("chair", seed, 128))
        base = [c for c in ann.root.children if c.template_node_id == 7][0]
        kinds.add(base.children[0].template_node_id)
    assert kinds == {8, 10}
