"""Maximum-score bipartite assignment between ground-truth and predicted masks."""
from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, InvalidArgumentError, InvalidDataError

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class Assignment:
    mapping: dict
    total_score: float

    def columns(self) -> list[int]:
        return [self.mapping[i] for i in sorted(self.mapping)]


def _check(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
        raise InvalidArgumentError(f"scores must be a non-empty T x K matrix, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidDataError("scores contain non-finite values")
    return s


def _tolerance(s: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(np.max(np.abs(s))))


def _min_cost_square(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian method on an n x n cost matrix.

    Returns (row -> column assignment, row potentials, column potentials).
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic(cost, assign, u, v, n_real, tol):
    """Among optimal perfect matchings, pick the lexicographically smallest
    column sequence for the first ``n_real`` rows.

    Optimal matchings are exactly the perfect matchings of the tight-edge
    graph, so each row greedily takes its smallest tight column that still
    admits a perfect matching (found by an alternating path).
    """
    n = cost.shape[0]
    tight = np.abs(cost - u[:, None] - v[None, :]) <= tol
    owner = np.empty(n, dtype=np.int64)
    owner[assign] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)
    for i in range(n_real):
        for j in np.nonzero(tight[i])[0]:
            if j >= assign[i]:
                break
            path = _reroute(tight, owner, fixed, i, j, assign[i])
            if path is None:
                continue
            for r, c in path:
                assign[r] = c
                owner[c] = r
            assign[i] = j
            owner[j] = i
            break
        fixed[i] = True
    return assign


def _reroute(tight, owner, fixed, i, j, target):
    """Alternating path letting owner[j] move so that ``target`` frees up."""
    start = owner[j]
    if fixed[start]:
        return None
    prev = {start: None}
    queue = deque([start])
    while queue:
        r = queue.popleft()
        for c in np.nonzero(tight[r])[0]:
            if c == j:
                continue
            if c == target:
                steps = [(r, c)]
                while prev[r] is not None:
                    pr, pc = prev[r]
                    steps.append((pr, pc))
                    r = pr
                return steps
            r2 = owner[c]
            if r2 == i or fixed[r2] or r2 in prev:
                continue
            prev[r2] = (r, c)
            queue.append(r2)
    return None


def hungarian(scores) -> Assignment:
    """Injective row -> column map maximizing the summed score.

    Requires T <= K. Among optimal maps the lexicographically smallest column
    sequence is returned.
    """
    s = _check(scores)
    t, k = s.shape
    if t > k:
        raise InvalidArgumentError(f"more rows ({t}) than columns ({k}); pad or transpose")
    cost = np.zeros((k, k))
    cost[:t] = s.max() - s
    assign, u, v = _min_cost_square(cost)
    assign = _lexicographic(cost, assign, u, v, t, _tolerance(s))
    mapping = {i: int(assign[i]) for i in range(t)}
    return Assignment(mapping, float(sum(s[i, mapping[i]] for i in range(t))))


def brute_force_match(scores) -> Assignment:
    """Exhaustive oracle; same optimum and tie rule as :func:`hungarian`."""
    s = _check(scores)
    t, k = s.shape
    if t > BRUTE_FORCE_LIMIT or k > BRUTE_FORCE_LIMIT:
        raise InvalidArgumentError(f"brute force is limited to {BRUTE_FORCE_LIMIT}x{BRUTE_FORCE_LIMIT}")
    if t > k:
        raise InvalidArgumentError(f"more rows ({t}) than columns ({k})")
    # permutations() yields column sequences in lexicographic order
    perms = np.array(list(itertools.permutations(range(k), t)), dtype=np.int64)
    totals = s[np.arange(t)[None, :], perms].sum(axis=1)
    best = perms[int(np.argmax(totals >= totals.max() - _tolerance(s)))]
    mapping = {i: int(c) for i, c in enumerate(best)}
    return Assignment(mapping, float(sum(s[i, mapping[i]] for i in range(t))))


def relaxed_iou_matrix(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Pairwise soft IoU between rows of ``gt`` (T x N) and ``pred`` (K x N)."""
    inter = gt @ pred.T
    union = gt.sum(axis=1)[:, None] + pred.sum(axis=1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def match_instances(mask_probabilities, gt_masks, truncate: bool = False):
    """Match ground-truth masks to the K learned mask channels.

    ``mask_probabilities`` is N x (K+1); its last column is the "other" mask
    and never takes part in matching. Returns (assignment, kept_gt_rows):
    with ``truncate`` the largest K ground-truth masks are kept when T > K,
    otherwise that case raises :class:`CapacityError`.
    """
    probs = np.asarray(mask_probabilities, dtype=np.float64)
    gt = np.asarray(gt_masks, dtype=np.float64)
    if gt.ndim != 2 or gt.shape[0] < 1:
        raise InvalidArgumentError("need at least one ground-truth mask")
    k = probs.shape[1] - 1
    rows = np.arange(gt.shape[0])
    if gt.shape[0] > k:
        if not truncate:
            raise CapacityError(f"{gt.shape[0]} ground-truth instances exceed {k} mask slots")
        sizes = gt.sum(axis=1)
        rows = np.sort(np.argsort(-sizes, kind="stable")[:k])
        log.warning("truncating %d ground-truth masks to the %d largest", gt.shape[0], k)
    scores = relaxed_iou_matrix(gt[rows], probs[:, :k].T)
    return hungarian(scores), rows
