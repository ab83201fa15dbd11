"""And-Or part templates: parsing, validation, "other" augmentation and
annotator-consistency analysis."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    IncompatibleAnnotationsError,
    InvalidArgumentError,
    NotFoundError,
    TemplateValidationError,
    UndefinedScoreError,
)

OTHER_LABEL = "other"
UNLABELED = "<unlabeled>"


class NodeKind(str, Enum):
    AND = "and"
    OR = "or"
    LEAF = "leaf"


@dataclass(frozen=True)
class TemplateNode:
    node_id: int
    label: str
    kind: NodeKind
    children: tuple[int, ...] = ()


@dataclass(frozen=True)
class Template:
    category: str
    nodes: Mapping[int, TemplateNode]
    root: int
    level_cuts: Mapping[int, frozenset]
    parent: Mapping[int, int] = field(default_factory=dict, compare=False, repr=False)
    # ids created by augment_other
    other_nodes: frozenset = frozenset()

    def node(self, node_id: int) -> TemplateNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NotFoundError(f"unknown template node {node_id!r}") from None

    def children(self, node_id: int) -> tuple[int, ...]:
        return self.node(node_id).children

    def is_leaf(self, node_id: int) -> bool:
        return self.node(node_id).kind is NodeKind.LEAF

    def ancestors(self, node_id: int) -> list[int]:
        """Chain from the root down to ``node_id`` (inclusive)."""
        self.node(node_id)
        chain = [node_id]
        while chain[-1] in self.parent:
            chain.append(self.parent[chain[-1]])
        return chain[::-1]

    def is_ancestor(self, anc: int, node_id: int) -> bool:
        return anc in self.ancestors(node_id)

    def depth_first(self) -> list[int]:
        order, stack = [], [self.root]
        while stack:
            n = stack.pop()
            order.append(n)
            stack.extend(reversed(self.nodes[n].children))
        return order

    def leaves(self) -> list[int]:
        return [n for n in self.depth_first() if self.nodes[n].kind is NodeKind.LEAF]

    def internal_nodes(self) -> list[int]:
        return [n for n in self.depth_first() if self.nodes[n].kind is not NodeKind.LEAF]

    def levels(self) -> list[int]:
        return sorted(self.level_cuts)

    def cut(self, level: int) -> list[int]:
        """Sorted node ids of a level cut; raises for undefined levels."""
        if level not in self.level_cuts:
            raise InvalidArgumentError(
                f"level {level!r} is not defined for template {self.category!r}"
            )
        return sorted(self.level_cuts[level])

    def child_by_label(self, node_id: int, label: str):
        for c in self.children(node_id):
            if self.nodes[c].label == label:
                return c
        return None

    def other_child(self, node_id: int):
        c = self.child_by_label(node_id, OTHER_LABEL)
        if c is not None and self.nodes[c].kind is NodeKind.LEAF:
            return c
        return None

    def root_to_leaf_paths(self) -> list[tuple[int, ...]]:
        return [tuple(self.ancestors(leaf)) for leaf in self.leaves()]

    def to_document(self) -> dict:
        return {
            "category": self.category,
            "root": self.root,
            "nodes": [
                {
                    "id": n.node_id,
                    "label": n.label,
                    "kind": n.kind.value,
                    "children": list(n.children),
                }
                for n in (self.nodes[i] for i in sorted(self.nodes))
            ],
            "levels": {str(k): sorted(v) for k, v in sorted(self.level_cuts.items())},
        }


def parse_template(document) -> Template:
    """Build a validated Template from a JSON string, a path or a mapping."""
    if isinstance(document, Path):
        document = json.loads(document.read_text(encoding="utf-8"))
    elif isinstance(document, (str, bytes)):
        document = json.loads(document)
    if not isinstance(document, Mapping):
        raise TemplateValidationError("template document must be a JSON object")
    for key in ("category", "root", "nodes", "levels"):
        if key not in document:
            raise TemplateValidationError(f"missing field {key!r}")

    nodes: dict[int, TemplateNode] = {}
    for raw in document["nodes"]:
        nid = raw.get("id")
        if not isinstance(nid, int) or isinstance(nid, bool) or nid < 0:
            raise TemplateValidationError(f"node id must be a non-negative integer, got {nid!r}")
        if nid in nodes:
            raise TemplateValidationError("duplicate node id", nid)
        try:
            kind = NodeKind(raw.get("kind"))
        except ValueError:
            raise TemplateValidationError(f"unknown kind {raw.get('kind')!r}", nid) from None
        children = tuple(raw.get("children", ()))
        label = raw.get("label")
        if not isinstance(label, str) or not label:
            raise TemplateValidationError("label must be a non-empty string", nid)
        nodes[nid] = TemplateNode(nid, label, kind, children)

    levels = {}
    for key, ids in document["levels"].items():
        try:
            lvl = int(key)
        except (TypeError, ValueError):
            raise TemplateValidationError(f"level key {key!r} is not an integer") from None
        levels[lvl] = frozenset(ids)
    return _build(document["category"], nodes, document["root"], levels)


def _build(category, nodes, root, levels, other_nodes=frozenset()) -> Template:
    if root not in nodes:
        raise TemplateValidationError("root is not a declared node", root)

    parent: dict[int, int] = {}
    for nid in sorted(nodes):
        node = nodes[nid]
        if node.kind is NodeKind.LEAF and node.children:
            raise TemplateValidationError("leaf node has children", nid)
        if node.kind is not NodeKind.LEAF and not node.children:
            raise TemplateValidationError(f"{node.kind.value} node has no children", nid)
        seen_labels = set()
        for c in node.children:
            if c == nid:
                raise TemplateValidationError("cycle: node lists itself as a child", nid)
            if c not in nodes:
                raise TemplateValidationError(f"child {c} is not a declared node", nid)
            if c in parent:
                raise TemplateValidationError(
                    f"node has more than one parent ({parent[c]} and {nid})", c
                )
            parent[c] = nid
            lab = nodes[c].label
            if lab in seen_labels:
                raise TemplateValidationError(f"duplicate sibling label {lab!r}", c)
            seen_labels.add(lab)
    if root in parent:
        raise TemplateValidationError(f"cycle: root has parent {parent[root]}", root)

    # every node must reach the root without revisiting
    for nid in sorted(nodes):
        seen = {nid}
        cur = nid
        while cur in parent:
            cur = parent[cur]
            if cur in seen:
                raise TemplateValidationError("cycle detected", nid)
            seen.add(cur)
        if cur != root:
            raise TemplateValidationError("orphan: node is not reachable from the root", nid)

    if 1 not in levels:
        raise TemplateValidationError("level 1 (coarse) is required")
    for lvl in sorted(levels):
        if lvl < 1:
            raise TemplateValidationError(f"level index {lvl} must be >= 1")
        cut = levels[lvl]
        if not cut:
            raise TemplateValidationError(f"level {lvl} cut is empty")
        for nid in sorted(cut):
            if nid not in nodes:
                raise TemplateValidationError(f"level {lvl} references unknown node", nid)
        for nid in sorted(cut):
            cur = nid
            while cur in parent:
                cur = parent[cur]
                if cur in cut:
                    raise TemplateValidationError(
                        f"level {lvl} cut is not an antichain (ancestor {cur} also in cut)", nid
                    )

    return Template(
        category=category,
        nodes=dict(nodes),
        root=root,
        level_cuts={k: frozenset(v) for k, v in levels.items()},
        parent=parent,
        other_nodes=frozenset(other_nodes),
    )


def load_template(path) -> Template:
    return parse_template(Path(path))


def save_template(template: Template, path) -> None:
    Path(path).write_text(
        json.dumps(template.to_document(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def template_warnings(template: Template) -> list[str]:
    """Soft design checks (never fatal)."""
    out = []
    for nid in template.depth_first():
        node = template.nodes[nid]
        if node.kind is NodeKind.OR and len(node.children) == 1:
            out.append(f"node {nid} ({node.label}): or-node with a single subtype is not compact")
    return out


def augment_other(template: Template) -> Template:
    """Give every internal node a trailing "other" leaf child.

    Existing ids keep their meaning; new ids continue after the current maximum.
    Internal nodes that already own an "other" leaf are left alone, so the
    operation is idempotent.
    """
    nodes = dict(template.nodes)
    next_id = max(nodes) + 1
    added = set(template.other_nodes)
    for nid in sorted(template.nodes):
        node = template.nodes[nid]
        if node.kind is NodeKind.LEAF or template.other_child(nid) is not None:
            continue
        nodes[next_id] = TemplateNode(next_id, OTHER_LABEL, NodeKind.LEAF, ())
        nodes[nid] = TemplateNode(nid, node.label, node.kind, node.children + (next_id,))
        added.add(next_id)
        next_id += 1
    if len(nodes) == len(template.nodes):
        return template
    return _build(template.category, nodes, template.root, dict(template.level_cuts), added)


def is_augmented(template: Template) -> bool:
    return all(template.other_child(n) is not None for n in template.internal_nodes())


def full_path_label(template: Template, node_id: int) -> str:
    return "/".join(template.nodes[n].label for n in template.ancestors(node_id))


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray
    row_normalized: np.ndarray


def _point_leaf_labels(annotation, template: Template) -> list:
    """Full-path label of each point's deepest instance node (None if unlabeled).

    A point sitting on an internal template node gets the label of that node's
    "other" leaf.
    """
    from .annotation import deepest_nodes

    deep = deepest_nodes(annotation)
    cache: dict[int, str] = {}
    out = []
    for nid in deep:
        if nid < 0:
            out.append(None)
            continue
        if nid not in cache:
            lab = full_path_label(template, nid)
            if not template.is_leaf(nid):
                lab += "/" + OTHER_LABEL
            cache[nid] = lab
        out.append(cache[nid])
    return out


def _confusion_counts(la, lb, index):
    n = len(index)
    counts = np.zeros((n, n), dtype=np.int64)
    for x, y in zip(la, lb):
        if x is None:
            continue
        counts[index[x], index[UNLABELED if y is None else y]] += 1
    return counts


def _row_normalize(counts):
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros(counts.shape), where=sums > 0)


def confusion_matrix(a, b, template: Template, symmetric: bool = False) -> ConfusionMatrix:
    """Point-level confusion between two annotations of the same shape.

    Rows follow ``a`` (the reference), columns ``b``. With ``symmetric`` the
    normalized matrix averages the a-referenced and b-referenced row
    normalizations wherever both rows are populated.
    """
    if a.shape_id != b.shape_id:
        raise IncompatibleAnnotationsError(
            f"annotations describe different shapes: {a.shape_id!r} vs {b.shape_id!r}"
        )
    if a.point_count != b.point_count:
        raise IncompatibleAnnotationsError(
            f"point counts differ: {a.point_count} vs {b.point_count}"
        )
    aug = augment_other(template)
    la = _point_leaf_labels(a, aug)
    lb = _point_leaf_labels(b, aug)
    labels = [full_path_label(aug, n) for n in aug.leaves()]
    extra = sorted({x for x in la + lb if x is not None} - set(labels))
    labels += extra
    if any(y is None for y in lb) or (symmetric and any(x is None for x in la)):
        labels.append(UNLABELED)
    index = {lab: i for i, lab in enumerate(labels)}

    counts = _confusion_counts(la, lb, index)
    norm = _row_normalize(counts)
    if symmetric:
        norm_ba = _row_normalize(_confusion_counts(lb, la, index))
        has_a = counts.sum(axis=1) > 0
        has_b = norm_ba.sum(axis=1) > 0
        both = has_a & has_b
        norm = np.where(both[:, None], 0.5 * (norm + norm_ba), np.where(has_a[:, None], norm, norm_ba))
    return ConfusionMatrix(tuple(labels), counts, norm)


def consistency_score(m: ConfusionMatrix) -> float:
    """Mean diagonal of the normalized matrix over populated rows."""
    rows = m.row_normalized.sum(axis=1) > 0
    if not rows.any():
        raise UndefinedScoreError("confusion matrix has no populated rows")
    return float(np.mean(np.diag(m.row_normalized)[rows]))


def confusion_pairs(m: ConfusionMatrix, top: int = 10) -> list[tuple[str, str, float]]:
    """Largest off-diagonal normalized entries, as candidates for template refinement."""
    r = m.row_normalized
    pairs = [
        (m.labels[i], m.labels[j], float(r[i, j]))
        for i in range(len(m.labels))
        for j in range(len(m.labels))
        if i != j and r[i, j] > 0
    ]
    pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
    return pairs[:top]


# ---------------------------------------------------------------- built-ins

def _doc(category, spec, levels):
    """spec: list of (id, label, kind, children)."""
    return {
        "category": category,
        "root": spec[0][0],
        "nodes": [
            {"id": i, "label": lab, "kind": kind, "children": list(ch)}
            for i, lab, kind, ch in spec
        ],
        "levels": {str(k): v for k, v in levels.items()},
    }


CHAIR_DOCUMENT = _doc(
    "chair",
    [
        (0, "chair", "and", [1, 5, 7, 13]),
        (1, "chair_back", "and", [2, 3]),
        (2, "back_surface", "leaf", []),
        (3, "back_frame", "and", [4, 16]),
        (4, "back_frame_vertical_bar", "leaf", []),
        (5, "chair_seat", "and", [6]),
        (6, "seat_surface", "leaf", []),
        (7, "chair_base", "or", [8, 10]),
        (8, "regular_leg_base", "and", [9, 17]),
        (9, "leg", "leaf", []),
        (10, "pedestal_base", "and", [11, 12]),
        (11, "central_support", "leaf", []),
        (12, "star_leg", "leaf", []),
        (13, "chair_arm", "and", [14, 15]),
        (14, "arm_horizontal_bar", "leaf", []),
        (15, "arm_vertical_bar", "leaf", []),
        (16, "back_frame_horizontal_bar", "leaf", []),
        (17, "bar_stretcher", "leaf", []),
    ],
    {
        1: [1, 5, 7, 13],
        2: [2, 3, 6, 8, 10, 14, 15],
        3: [2, 4, 16, 6, 9, 17, 11, 12, 14, 15],
    },
)

LAMP_DOCUMENT = _doc(
    "lamp",
    [
        (0, "lamp", "or", [1, 8]),
        (1, "table_lamp", "and", [2, 4, 6]),
        (2, "lamp_base", "and", [3]),
        (3, "lamp_base_part", "leaf", []),
        (4, "lamp_body", "and", [5]),
        (5, "lamp_pole", "leaf", []),
        (6, "lamp_unit", "and", [7, 15]),
        (7, "lamp_shade", "leaf", []),
        (8, "floor_lamp", "and", [9, 12, 13]),
        (9, "lamp_base", "and", [10, 11]),
        (10, "lamp_base_part", "leaf", []),
        (11, "foot", "leaf", []),
        (12, "lamp_body", "leaf", []),
        (13, "lamp_unit", "and", [14, 16]),
        (14, "lamp_shade", "leaf", []),
        (15, "light_bulb", "leaf", []),
        (16, "light_bulb", "leaf", []),
    ],
    {
        1: [2, 4, 6, 9, 12, 13],
        3: [3, 5, 7, 15, 10, 11, 12, 14, 16],
    },
)

BUILTIN_DOCUMENTS = {"chair": CHAIR_DOCUMENT, "lamp": LAMP_DOCUMENT}


def builtin_template(category: str) -> Template:
    try:
        return parse_template(BUILTIN_DOCUMENTS[category])
    except KeyError:
        raise InvalidArgumentError(
            f"no built-in template for {category!r} (have {sorted(BUILTIN_DOCUMENTS)})"
        ) from None
