"""Hierarchical semantic segmentation: bottom-up gathering, top-down
multi-label decoding and ensemble path voting."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .annotation import Annotation, deepest_nodes
from .errors import FormatError, InvalidArgumentError, UndefinedScoreError
from .template import Template, augment_other, is_augmented


@dataclass
class NodeScores:
    """Per-point scores (N x L) over the template nodes listed in ``nodes``."""

    scores: np.ndarray
    nodes: tuple

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.nodes = tuple(int(n) for n in self.nodes)
        if self.scores.ndim != 2 or self.scores.shape[1] != len(self.nodes):
            raise InvalidArgumentError(
                f"scores of shape {self.scores.shape} do not match {len(self.nodes)} nodes"
            )
        if np.any(self.scores < 0):
            raise InvalidArgumentError("node scores must be non-negative")

    def column(self, node_id: int) -> int:
        return self.nodes.index(node_id)


@dataclass
class PathPrediction:
    paths: list

    def __len__(self):
        return len(self.paths)


def _augmented(template: Template) -> Template:
    return template if is_augmented(template) else augment_other(template)


def top_down_nodes(template: Template) -> list[int]:
    """Label set of the multi-label network: every augmented node but the root."""
    aug = _augmented(template)
    return [n for n in sorted(aug.nodes) if n != aug.root]


def leaf_nodes(template: Template) -> list[int]:
    return sorted(_augmented(template).leaves())


def bottom_up_gather(leaf_scores: NodeScores, template: Template) -> NodeScores:
    """Score of every node = sum of its descendant (augmented) leaf scores."""
    aug = _augmented(template)
    leaves = set(aug.leaves())
    if set(leaf_scores.nodes) != leaves or len(leaf_scores.nodes) != len(leaves):
        raise InvalidArgumentError("leaf scores must cover exactly the augmented template leaves")
    nodes = sorted(aug.nodes)
    col = {n: i for i, n in enumerate(nodes)}
    out = np.zeros((leaf_scores.scores.shape[0], len(nodes)))
    for n in reversed(aug.depth_first()):
        if n in leaves:
            out[:, col[n]] = leaf_scores.scores[:, leaf_scores.column(n)]
        else:
            for c in aug.children(n):
                out[:, col[n]] += out[:, col[c]]
    return NodeScores(out, nodes)


def bottom_up_decode(leaf_scores: NodeScores, template: Template) -> PathPrediction:
    """Best leaf per point (lowest node id on ties) and its ancestor chain."""
    aug = _augmented(template)
    order = np.argsort(leaf_scores.nodes, kind="stable")
    nodes = np.asarray(leaf_scores.nodes)[order]
    best = nodes[np.argmax(leaf_scores.scores[:, order], axis=1)]
    chains = {int(n): tuple(aug.ancestors(int(n))) for n in set(best.tolist())}
    return PathPrediction([chains[int(n)] for n in best])


def multi_label_loss(node_scores: NodeScores, gt_paths) -> float:
    """Mean over labeled points of -sum(log s) along the ground-truth path.

    Path nodes outside the score's label set (the root) are skipped; points
    whose path has no scored node do not count.
    """
    col = {n: i for i, n in enumerate(node_scores.nodes)}
    s = node_scores.scores
    if len(gt_paths) != s.shape[0]:
        raise InvalidArgumentError(f"{len(gt_paths)} paths for {s.shape[0]} points")
    total, counted = 0.0, 0
    with np.errstate(divide="ignore"):
        for p, path in enumerate(gt_paths):
            cols = [col[n] for n in path if n in col]
            if not cols:
                continue
            total -= float(np.sum(np.log(s[p, cols])))
            counted += 1
    return total / counted if counted else 0.0


def top_down_decode(node_scores: NodeScores, template: Template) -> PathPrediction:
    """Descend from the root to the highest-scoring child until a leaf."""
    aug = _augmented(template) if any(n not in template.nodes for n in node_scores.nodes) else template
    col = {n: i for i, n in enumerate(node_scores.nodes)}
    s = node_scores.scores
    n_pts = s.shape[0]
    paths = [[aug.root] for _ in range(n_pts)]
    current = np.full(n_pts, aug.root, dtype=np.int64)
    active = np.ones(n_pts, dtype=bool)
    while active.any():
        for node in np.unique(current[active]):
            node = int(node)
            pts = np.nonzero(active & (current == node))[0]
            kids = sorted(aug.children(node))
            if not kids:
                active[pts] = False
                continue
            missing = [k for k in kids if k not in col]
            if missing:
                raise InvalidArgumentError(f"no scores for child nodes {missing} of {node}")
            choice = np.asarray(kids)[np.argmax(s[np.ix_(pts, [col[k] for k in kids])], axis=1)]
            current[pts] = choice
            for p, c in zip(pts, choice):
                paths[p].append(int(c))
    return PathPrediction([tuple(p) for p in paths])


def ensemble_path_vote(level_scores: Mapping[int, NodeScores], template: Template,
                       level_weights: Optional[Mapping[int, float]] = None) -> PathPrediction:
    """Pick, per point, the root-to-leaf path with the highest (weighted)
    mean log-score over the levels whose cut meets the path.

    Levels that miss a path are left out of its mean; paths meeting no level
    are not candidates. Ties go to the lexicographically smallest path.
    """
    if not level_scores:
        raise InvalidArgumentError("need scores for at least one level")
    weights = {lvl: 1.0 for lvl in level_scores}
    if level_weights:
        weights.update(level_weights)
    paths = sorted(template.root_to_leaf_paths())
    n_pts = next(iter(level_scores.values())).scores.shape[0]
    totals, kept = [], []
    with np.errstate(divide="ignore"):
        logs = {lvl: np.log(ns.scores) for lvl, ns in level_scores.items()}
        for path in paths:
            acc = np.zeros(n_pts)
            wsum = 0.0
            for lvl in sorted(level_scores):
                ns = level_scores[lvl]
                hit = [n for n in path if n in ns.nodes]
                if not hit:
                    continue
                acc = acc + weights[lvl] * logs[lvl][:, ns.column(hit[0])]
                wsum += weights[lvl]
            if wsum > 0:
                totals.append(acc / wsum)
                kept.append(path)
    if not kept:
        raise UndefinedScoreError("no root-to-leaf path meets any scored level")
    best = np.argmax(np.stack(totals, axis=1), axis=1)
    return PathPrediction([kept[i] for i in best])


# ---------------------------------------------------------------- training targets

def _deepest_aug_nodes(a: Annotation, aug: Template) -> np.ndarray:
    """Deepest node per point; internal ones are replaced by their "other" leaf."""
    deep = deepest_nodes(a)
    out = deep.copy()
    for nid in np.unique(deep):
        if nid >= 0 and not aug.is_leaf(int(nid)):
            out[deep == nid] = aug.other_child(int(nid))
    return out


def leaf_targets(a: Annotation, template: Template) -> tuple[np.ndarray, list[int]]:
    """One-hot rows over the augmented leaves (zero rows for unlabeled points)."""
    aug = _augmented(template)
    leaves = leaf_nodes(aug)
    col = {n: i for i, n in enumerate(leaves)}
    deep = _deepest_aug_nodes(a, aug)
    out = np.zeros((a.point_count, len(leaves)))
    for p, nid in enumerate(deep):
        if nid >= 0:
            out[p, col[int(nid)]] = 1.0
    return out, leaves


def path_targets(a: Annotation, template: Template) -> tuple[np.ndarray, list[int]]:
    """Multi-hot rows marking every non-root node on each point's path."""
    aug = _augmented(template)
    nodes = top_down_nodes(aug)
    col = {n: i for i, n in enumerate(nodes)}
    deep = _deepest_aug_nodes(a, aug)
    out = np.zeros((a.point_count, len(nodes)))
    chains = {}
    for p, nid in enumerate(deep):
        if nid < 0:
            continue
        nid = int(nid)
        if nid not in chains:
            chains[nid] = [col[n] for n in aug.ancestors(nid) if n in col]
        out[p, chains[nid]] = 1.0
    return out, nodes


# ---------------------------------------------------------------- IO

def save_paths(pred: PathPrediction, path) -> None:
    Path(path).write_text(json.dumps({"paths": [list(p) for p in pred.paths]}) + "\n", encoding="utf-8")


def load_paths(path) -> PathPrediction:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        return PathPrediction([tuple(int(n) for n in p) for p in doc["paths"]])
    except json.JSONDecodeError as e:
        raise FormatError(e.msg, path, line=e.lineno) from None
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad path prediction file: {e}", path) from None
