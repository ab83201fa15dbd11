"""Instance-tree annotations, per-level flattening, splits and file IO."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .template import Template


@dataclass
class InstanceNode:
    template_node_id: int
    children: list["InstanceNode"] = field(default_factory=list)
    point_indices: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "node": self.template_node_id,
            "children": [c.to_dict() for c in self.children],
            "point_indices": [int(i) for i in self.point_indices],
        }

    @classmethod
    def from_dict(cls, d) -> "InstanceNode":
        return cls(
            int(d["node"]),
            [cls.from_dict(c) for c in d.get("children", [])],
            [int(i) for i in d.get("point_indices", [])],
        )


@dataclass
class Annotation:
    shape_id: str
    category: str
    root: InstanceNode
    point_count: int

    def to_dict(self) -> dict:
        return {
            "shape_id": self.shape_id,
            "category": self.category,
            "point_count": self.point_count,
            "root": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "Annotation":
        return cls(str(d["shape_id"]), str(d["category"]), InstanceNode.from_dict(d["root"]),
                   int(d["point_count"]))


def save_annotation(a: Annotation, path) -> None:
    Path(path).write_text(json.dumps(a.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_annotation(path) -> Annotation:
    path = Path(path)
    try:
        return Annotation.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as e:
        raise FormatError(e.msg, path, line=e.lineno) from None
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad annotation structure: {e}", path) from None


def _instance_nodes(a: Annotation):
    """Pre-order (readable path, node, template ancestry) triples."""
    stack = [(a.root, "", ())]
    while stack:
        node, prefix, chain = stack.pop()
        yield prefix, node, chain + (node.template_node_id,)
        counts: dict[int, int] = {}
        items = []
        for child in node.children:
            k = counts.get(child.template_node_id, 0)
            counts[child.template_node_id] = k + 1
            items.append((child, k))
        for child, k in reversed(items):
            stack.append((child, f"{prefix}/{child.template_node_id}[{k}]",
                          chain + (node.template_node_id,)))


def _pretty_path(t: Template, raw: str, root_id: int) -> str:
    parts = [t.nodes[root_id].label if root_id in t.nodes else str(root_id)]
    for step in raw.split("/")[1:]:
        nid, idx = step[:-1].split("[")
        nid = int(nid)
        parts.append(f"{t.nodes[nid].label if nid in t.nodes else nid}[{idx}]")
    return "/".join(parts)


def validate_annotation(a: Annotation, t: Template) -> list[str]:
    """Violations of the instance-tree rules against ``t``; empty when valid."""
    out: list[str] = []
    if a.category != t.category:
        out.append(f"category {a.category!r} does not match template {t.category!r}")
    if a.point_count < 1:
        out.append(f"point_count must be positive, got {a.point_count}")
    if a.root.template_node_id != t.root:
        out.append(f"root instance uses template node {a.root.template_node_id}, expected {t.root}")

    owner: dict[int, str] = {}
    root_id = a.root.template_node_id
    stack = [(a.root, "")]
    while stack:
        node, raw = stack.pop()
        where = _pretty_path(t, raw, root_id)
        nid = node.template_node_id
        if nid not in t.nodes:
            out.append(f"{where}: unknown template node {nid}")
            continue
        allowed = set(t.nodes[nid].children)
        if node.children and node.point_indices:
            out.append(f"{where}: points attached to a node that has children")
        counts: dict[int, int] = {}
        for child in node.children:
            k = counts.get(child.template_node_id, 0)
            counts[child.template_node_id] = k + 1
            child_raw = f"{raw}/{child.template_node_id}[{k}]"
            if child.template_node_id not in allowed:
                out.append(f"{_pretty_path(t, child_raw, root_id)}: template node "
                           f"{child.template_node_id} is not a child of {nid}")
                continue
            stack.append((child, child_raw))
        if not node.children:
            for p in node.point_indices:
                if not 0 <= p < a.point_count:
                    out.append(f"{where}: point index {p} out of range [0, {a.point_count})")
                elif p in owner:
                    out.append(f"{where}: point {p} also belongs to {owner[p]} (leaves must be disjoint)")
                else:
                    owner[p] = where
    return out


def exclude_parts(a: Annotation, node_ids) -> Annotation:
    """Copy of ``a`` with every instance of the given template nodes removed.

    Points under a removed subtree become unlabeled, so they drop out of
    training targets and evaluation alike (e.g. texture-dependent parts).
    """
    drop = {int(n) for n in node_ids}

    def keep(node: InstanceNode):
        if node.template_node_id in drop:
            return None
        kids = [c for c in (keep(ch) for ch in node.children) if c is not None]
        return InstanceNode(node.template_node_id, kids, list(node.point_indices))

    if a.root.template_node_id in drop:
        raise InvalidArgumentError("cannot exclude the root")
    return Annotation(a.shape_id, a.category, keep(a.root), a.point_count)


def deepest_nodes(a: Annotation) -> np.ndarray:
    """Template node id of each point's deepest instance node, -1 if unlabeled."""
    out = np.full(a.point_count, -1, dtype=np.int64)
    for _, node, _ in _instance_nodes(a):
        if not node.children and node.point_indices:
            out[np.asarray(node.point_indices, dtype=np.int64)] = node.template_node_id
    return out


def point_paths(a: Annotation) -> list[tuple[int, ...]]:
    """Root-to-deepest-node template id chain per point (empty if unlabeled)."""
    paths: list[tuple[int, ...]] = [()] * a.point_count
    for _, node, chain in _instance_nodes(a):
        if not node.children:
            for p in node.point_indices:
                paths[p] = chain
    return paths


@dataclass
class LevelLabels:
    level: int
    semantic: np.ndarray
    instance: np.ndarray
    instance_semantics: dict
    # label id k (1-based) stands for template node label_nodes[k - 1]
    label_nodes: tuple[int, ...] = ()

    @property
    def n_labels(self) -> int:
        return len(self.label_nodes)

    @property
    def n_instances(self) -> int:
        return len(self.instance_semantics)

    def instance_masks(self) -> np.ndarray:
        """(T, N) binary masks in instance-id order."""
        ids = np.arange(1, self.n_instances + 1)
        return (self.instance[None, :] == ids[:, None]).astype(np.float64)

    def instance_labels(self) -> np.ndarray:
        lookup = {n: k + 1 for k, n in enumerate(self.label_nodes)}
        return np.array([lookup[self.instance_semantics[i]] for i in range(1, self.n_instances + 1)],
                        dtype=np.int64)


def _subtree_points(node: InstanceNode) -> list[int]:
    out, stack = [], [node]
    while stack:
        n = stack.pop()
        if not n.children:
            out.extend(n.point_indices)
        stack.extend(n.children)
    return out


def flatten(a: Annotation, t: Template, level: int) -> LevelLabels:
    """Per-point semantic and instance ids at one level cut.

    Every instance node whose template node lies in the cut becomes one
    instance (ids assigned in pre-order, skipping subtrees without points).
    """
    cut = t.cut(level)
    cut_set = set(cut)
    label_of = {n: k + 1 for k, n in enumerate(cut)}
    semantic = np.zeros(a.point_count, dtype=np.int64)
    instance = np.zeros(a.point_count, dtype=np.int64)
    inst_sem: dict[int, int] = {}

    stack = [a.root]
    while stack:
        node = stack.pop()
        if node.template_node_id not in cut_set:
            stack.extend(reversed(node.children))
            continue
        pts = _subtree_points(node)
        if not pts:
            continue
        i = len(inst_sem) + 1
        inst_sem[i] = node.template_node_id
        idx = np.asarray(pts, dtype=np.int64)
        instance[idx] = i
        semantic[idx] = label_of[node.template_node_id]
    return LevelLabels(level, semantic, instance, inst_sem, tuple(cut))


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [r * n for r in ratios]
    sizes = [int(np.floor(q + 1e-9)) for q in quotas]
    rest = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split_dataset(shape_ids: Sequence[str], ratios=(0.7, 0.1, 0.2), seed=0):
    """Deterministic train/val/test split ordered by FNV-1a of seed + shape id."""
    ids = list(shape_ids)
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("duplicate shape ids")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"ratios must be three non-negative numbers summing to 1: {ratios}")
    key = str(seed)
    ordered = sorted(ids, key=lambda s: (fnv1a64((key + s).encode("utf-8")), s))
    n_train, n_val, _ = _largest_remainder(len(ids), ratios)
    return (
        ordered[:n_train],
        ordered[n_train:n_train + n_val],
        ordered[n_train + n_val:],
    )
