import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import best_assignment
from partseg.errors import CapacityError, InvalidArgumentError, InvalidDataError
from partseg.matching import brute_force_match, hungarian, match_instances, relaxed_iou_matrix


def random_problem(rng, integer):
    t = int(rng.integers(1, 8))
    k = int(rng.integers(t, 8))
    if integer:
        return rng.integers(0, 4, (t, k)).astype(float)
    return rng.uniform(-1, 1, (t, k))


def test_examples():
    a = hungarian([[0.9, 0.1], [0.2, 0.8]])
    assert a.mapping == {0: 0, 1: 1}
    assert a.total_score == pytest.approx(1.7, abs=1e-12)
    assert hungarian(np.eye(5) * 3 + 0.1).mapping == {i: i for i in range(5)}
    assert hungarian([[0.2, 0.7, 0.1, 0.7]]).mapping == {0: 1}


def test_all_equal_is_lexicographic():
    assert hungarian(np.ones((3, 5))).mapping == {0: 0, 1: 1, 2: 2}
    assert brute_force_match(np.ones((3, 5))).mapping == {0: 0, 1: 1, 2: 2}


@pytest.mark.parametrize("integer", [True, False])
def test_agrees_with_enumeration(integer):
    rng = np.random.default_rng(11 if integer else 12)
    for _ in range(200):
        s = random_problem(rng, integer)
        h = hungarian(s)
        best, lex = best_assignment(s)
        if integer:
            assert h.total_score == best
        else:
            assert abs(h.total_score - best) <= 1e-9
        assert h.mapping == lex
        assert brute_force_match(s).mapping == lex


def test_random_probing_3x5():
    rng = np.random.default_rng(5)
    s = rng.uniform(size=(3, 5))
    total = brute_force_match(s).total_score
    for _ in range(200):
        cols = rng.permutation(5)[:3]
        assert total >= s[np.arange(3), cols].sum() - 1e-12


@given(st.integers(0, 2**31), st.sampled_from([2.0, 0.5, 3.0]))
def test_scaling_keeps_mapping(seed, c):
    s = random_problem(np.random.default_rng(seed), integer=True)
    assert hungarian(s).mapping == hungarian(s * c).mapping


@given(st.integers(0, 2**31))
def test_row_permutation_consistent(seed):
    rng = np.random.default_rng(seed)
    s = random_problem(rng, integer=False)
    perm = rng.permutation(len(s))
    a, b = hungarian(s).mapping, hungarian(s[perm]).mapping
    assert all(b[i] == a[int(perm[i])] for i in range(len(s)))


def test_errors():
    with pytest.raises(InvalidDataError):
        hungarian([[np.nan, 1.0]])
    with pytest.raises(InvalidArgumentError):
        hungarian(np.ones((3, 2)))
    with pytest.raises(InvalidArgumentError):
        brute_force_match(np.ones((9, 9)))


def test_large_problem_is_polynomial():
    rng = np.random.default_rng(0)
    s = rng.uniform(size=(200, 200))
    a = hungarian(s)
    assert sorted(a.mapping.values()) == list(range(200))


# ---------------------------------------------------------------- instance matching

def _probs(masks_k, n):
    """Soft N x (K+1) probabilities from K binary rows plus an 'other' column."""
    p = np.zeros((n, len(masks_k) + 1))
    p[:, :-1] = np.asarray(masks_k, dtype=float).T
    p[p.sum(axis=1) == 0, -1] = 1.0
    return p / p.sum(axis=1, keepdims=True)


def test_match_exact_predictions():
    gt = np.array([[1, 1, 0, 0, 0], [0, 0, 1, 1, 0]], dtype=float)
    probs = _probs([[0, 0, 1, 1, 0], [0, 0, 0, 0, 0], [1, 1, 0, 0, 0]], 5)
    a, rows = match_instances(probs, gt)
    assert a.mapping == {0: 2, 1: 0}
    assert a.total_score == 2.0
    assert rows.tolist() == [0, 1]


def test_match_excludes_other_column():
    gt = np.array([[0, 0, 0, 1.0]])
    probs = np.array([[1.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    a, _ = match_instances(probs, gt)
    assert a.mapping[0] in (0, 1)


def test_match_zero_predictions_lexicographic():
    gt = np.eye(3)
    probs = np.zeros((3, 5))
    probs[:, -1] = 1.0
    a, _ = match_instances(probs, gt)
    assert a.total_score == 0.0
    assert a.mapping == {0: 0, 1: 1, 2: 2}


def test_match_random_against_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = 12
        gt = (rng.uniform(size=(3, n)) > 0.5).astype(float)
        logits = rng.normal(size=(n, 6))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        a, _ = match_instances(probs, gt)
        s = relaxed_iou_matrix(gt, probs[:, :5].T)
        assert a.mapping == brute_force_match(s).mapping


def test_capacity():
    gt = np.eye(4)
    probs = np.full((4, 3), 1 / 3)
    with pytest.raises(CapacityError):
        match_instances(probs, gt)
    gt[0, 1] = 1  # make row 0 the largest mask
    a, rows = match_instances(probs, gt, truncate=True)
    assert len(a.mapping) == 2 and 0 in rows.tolist()
