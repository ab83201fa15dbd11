"""Segmentation metrics: relaxed IoU, part-category / shape mIoU,
hierarchical mIoU and instance mAP."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidDataError
from .template import Template, augment_other, full_path_label

HIER_LEVEL = 0  # level key used by whole-tree reports


def relaxed_iou(p, q) -> float:
    """<p,q> / (|p|_1 + |q|_1 - <p,q>); 0 when both masks are empty."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"mask lengths differ: {p.shape} vs {q.shape}")
    inter = float(np.dot(p, q))
    union = float(p.sum() + q.sum()) - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class EvalReport:
    """Metric cells plus aggregates.

    Cells are keyed ``(level, name)``; ``primary`` says whether the
    aggregates average part-category cells or per-shape cells.
    """

    metric: str
    primary: str
    per_part_category: dict = field(default_factory=dict)
    per_shape: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    aggregates: dict = field(default_factory=dict)

    def cells(self) -> dict:
        return self.per_part_category if self.primary == "part_category" else self.per_shape

    def levels(self) -> list[int]:
        return sorted({lvl for lvl, _ in self.cells()})

    def recompute(self) -> dict:
        cells = self.cells()
        agg = {}
        level_means = []
        for lvl in self.levels():
            vals = [v for (l, _), v in sorted(cells.items()) if l == lvl]
            agg[f"level_{lvl}"] = float(np.mean(vals))
            level_means.append(agg[f"level_{lvl}"])
        agg["avg"] = float(np.mean(level_means)) if level_means else 0.0
        return agg

    def finalize(self) -> "EvalReport":
        self.aggregates = self.recompute()
        return self

    def level_score(self, level: int):
        return self.aggregates.get(f"level_{level}")

    @property
    def avg(self) -> float:
        return self.aggregates.get("avg")

    def to_dict(self) -> dict:
        def keyed(d):
            return {f"{lvl}/{name}": v for (lvl, name), v in sorted(d.items())}

        return {
            "metric": self.metric,
            "primary": self.primary,
            "per_part_category": keyed(self.per_part_category),
            "per_shape": keyed(self.per_shape),
            "counts": keyed(self.counts),
            "aggregates": dict(sorted(self.aggregates.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        def unkey(m):
            out = {}
            for k, v in m.items():
                lvl, name = k.split("/", 1)
                out[(int(lvl), name)] = v
            return out

        return cls(d["metric"], d["primary"], unkey(d["per_part_category"]), unkey(d["per_shape"]),
                   unkey(d["counts"]), dict(d["aggregates"]))


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Combine single-level reports of one metric into a multi-level report."""
    if not reports:
        raise InvalidArgumentError("nothing to merge")
    out = EvalReport(reports[0].metric, reports[0].primary)
    for r in reports:
        if (r.metric, r.primary) != (out.metric, out.primary):
            raise InvalidArgumentError("cannot merge reports of different metrics")
        out.per_part_category.update(r.per_part_category)
        out.per_shape.update(r.per_shape)
        out.counts.update(r.counts)
    return out.finalize()


# ---------------------------------------------------------------- semantic

def _gt_semantic(gt):
    return np.asarray(getattr(gt, "semantic", gt), dtype=np.int64)


def _check_shapes(predictions: Mapping, ground_truths: Mapping):
    if set(predictions) != set(ground_truths):
        missing = sorted(set(ground_truths) - set(predictions))
        extra = sorted(set(predictions) - set(ground_truths))
        raise InvalidArgumentError(f"prediction/ground-truth shape sets differ: missing={missing} extra={extra}")
    return sorted(ground_truths)


def _semantic_pair(pred, gt, n_labels, sid):
    pred = np.asarray(pred, dtype=np.int64)
    gt = _gt_semantic(gt)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"shape {sid!r}: {len(pred)} predicted labels for {len(gt)} points")
    if pred.size and (pred.min() < 0 or pred.max() > n_labels):
        raise InvalidDataError(f"shape {sid!r}: predicted label outside [0, {n_labels}]")
    keep = gt > 0
    return pred[keep], gt[keep]


def _label_names(template: Template, level: int) -> list[str]:
    return [full_path_label(template, n) for n in template.cut(level)]


def semantic_part_category_miou(predictions: Mapping, ground_truths: Mapping, template: Template,
                                level: int, per_shape_average: bool = False) -> EvalReport:
    """Mean over part categories of IoU pooled across shapes.

    With ``per_shape_average`` each category's IoU is instead averaged over
    the shapes where it has a non-empty union.
    """
    names = _label_names(template, level)
    s = len(names)
    shapes = _check_shapes(predictions, ground_truths)
    inter = np.zeros(s + 1, dtype=np.int64)
    union = np.zeros(s + 1, dtype=np.int64)
    gt_count = np.zeros(s + 1, dtype=np.int64)
    per_shape_sum = np.zeros(s + 1)
    per_shape_n = np.zeros(s + 1, dtype=np.int64)
    for sid in shapes:
        pred, gt = _semantic_pair(predictions[sid], ground_truths[sid], s, sid)
        pc = np.bincount(pred, minlength=s + 1)
        gc = np.bincount(gt, minlength=s + 1)
        ic = np.bincount(gt[pred == gt], minlength=s + 1)
        uc = pc + gc - ic
        inter += ic
        union += uc
        gt_count += gc
        nz = uc > 0
        per_shape_sum[nz] += ic[nz] / uc[nz]
        per_shape_n[nz] += 1
    rep = EvalReport("semantic_part_category_miou", "part_category")
    for c in range(1, s + 1):
        if union[c] == 0:
            continue
        key = (level, names[c - 1])
        if per_shape_average:
            rep.per_part_category[key] = float(per_shape_sum[c] / per_shape_n[c])
        else:
            rep.per_part_category[key] = float(inter[c] / union[c])
        rep.counts[key] = {"gt": int(gt_count[c]), "intersection": int(inter[c]), "union": int(union[c])}
    return rep.finalize()


def semantic_shape_miou(predictions: Mapping, ground_truths: Mapping, template: Template,
                        level: int) -> EvalReport:
    names = _label_names(template, level)
    s = len(names)
    rep = EvalReport("semantic_shape_miou", "shape")
    for sid in _check_shapes(predictions, ground_truths):
        pred, gt = _semantic_pair(predictions[sid], ground_truths[sid], s, sid)
        pc = np.bincount(pred, minlength=s + 1)[1:]
        gc = np.bincount(gt, minlength=s + 1)[1:]
        ic = np.bincount(gt[pred == gt], minlength=s + 1)[1:]
        present = (pc > 0) | (gc > 0)
        if not present.any():
            continue
        rep.per_shape[(level, sid)] = float(np.mean(ic[present] / (pc + gc - ic)[present]))
        rep.counts[(level, sid)] = {"categories": int(present.sum()), "points": int(len(gt))}
    return rep.finalize()


# ---------------------------------------------------------------- hierarchical

def _membership(paths, index, template: Template, sid, kind):
    m = np.zeros((len(paths), len(index)), dtype=bool)
    for p, path in enumerate(paths):
        prev = None
        for nid in path:
            if nid not in template.nodes:
                raise InvalidDataError(f"shape {sid!r} point {p}: unknown node {nid} in {kind} path")
            if prev is None and nid != template.root:
                raise InvalidDataError(f"shape {sid!r} point {p}: {kind} path does not start at the root")
            if prev is not None and template.parent.get(nid) != prev:
                raise InvalidDataError(f"shape {sid!r} point {p}: {kind} path is not an ancestor chain")
            prev = nid
            # "other" leaves count as their parent only
            if nid in index:
                m[p, index[nid]] = True
    return m


def _hier_members(predictions, ground_truths, template):
    template = augment_other(template)
    nodes = [n for n in sorted(template.nodes) if n not in template.other_nodes]
    index = {n: i for i, n in enumerate(nodes)}
    out = []
    for sid in _check_shapes(predictions, ground_truths):
        pred = predictions[sid]
        pred = getattr(pred, "paths", pred)
        gt = ground_truths[sid]
        if len(pred) != len(gt):
            raise InvalidArgumentError(f"shape {sid!r}: {len(pred)} predicted paths for {len(gt)} points")
        keep = np.array([len(p) > 0 for p in gt], dtype=bool)
        pm = _membership(pred, index, template, sid, "predicted")[keep]
        gm = _membership(gt, index, template, sid, "ground-truth")[keep]
        out.append((sid, pm, gm))
    return nodes, out


def hierarchical_miou(predictions: Mapping, ground_truths: Mapping, template: Template) -> EvalReport:
    """Pooled IoU for every tree node (root included), averaged over nodes.

    ``predictions`` and ``ground_truths`` map shape ids to per-point
    root-to-node id paths; empty ground-truth paths mark unlabeled points.
    """
    nodes, members = _hier_members(predictions, ground_truths, template)
    inter = np.zeros(len(nodes), dtype=np.int64)
    union = np.zeros(len(nodes), dtype=np.int64)
    gt_count = np.zeros(len(nodes), dtype=np.int64)
    for _, pm, gm in members:
        inter += (pm & gm).sum(axis=0)
        union += (pm | gm).sum(axis=0)
        gt_count += gm.sum(axis=0)
    rep = EvalReport("hierarchical_miou", "part_category")
    for i, n in enumerate(nodes):
        if union[i] == 0:
            continue
        key = (HIER_LEVEL, full_path_label(template, n))
        rep.per_part_category[key] = float(inter[i] / union[i])
        rep.counts[key] = {"gt": int(gt_count[i]), "intersection": int(inter[i]), "union": int(union[i])}
    return rep.finalize()


def hierarchical_shape_miou(predictions: Mapping, ground_truths: Mapping, template: Template) -> EvalReport:
    """Per-shape mean IoU over tree nodes predicted or present, then averaged."""
    _, members = _hier_members(predictions, ground_truths, template)
    rep = EvalReport("hierarchical_shape_miou", "shape")
    for sid, pm, gm in members:
        i = (pm & gm).sum(axis=0)
        u = (pm | gm).sum(axis=0)
        present = u > 0
        if not present.any():
            continue
        rep.per_shape[(HIER_LEVEL, sid)] = float(np.mean(i[present] / u[present]))
        rep.counts[(HIER_LEVEL, sid)] = {"nodes": int(present.sum())}
    return rep.finalize()


# ---------------------------------------------------------------- instances

@dataclass
class Instance:
    """A binary instance mask within one shape.

    ``confidence`` is ignored for ground-truth instances.
    """

    shape_id: str
    mask: np.ndarray
    label: int
    confidence: float = 1.0


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def average_precision(tp: Sequence[bool], n_positive: int) -> float:
    """Area under the monotone precision envelope of a ranked TP/FP list."""
    if n_positive == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_positive
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def _rank_and_match(preds, gts, threshold):
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].shape_id, i))
    by_shape: dict = {}
    for g in gts:
        by_shape.setdefault(g.shape_id, []).append(g)
    used = {id(g): False for g in gts}
    tp = []
    for i in order:
        p = preds[i]
        best, best_iou = None, -1.0
        for g in by_shape.get(p.shape_id, ()):
            if used[id(g)]:
                continue
            iou = _mask_iou(p.mask, g.mask)
            if iou > best_iou:
                best, best_iou = g, iou
        if best is not None and best_iou > threshold:
            used[id(best)] = True
            tp.append(True)
        else:
            tp.append(False)
    return tp


def _validate_instances(preds, gts):
    for p in preds:
        if not 0.0 <= p.confidence <= 1.0 or not np.isfinite(p.confidence):
            raise InvalidDataError(f"confidence {p.confidence!r} outside [0, 1] (shape {p.shape_id!r})")


def instance_ap(predicted: Sequence[Instance], ground_truth: Sequence[Instance],
                iou_threshold: float = 0.5) -> dict:
    """AP per semantic label.

    Labels with ground truth get their AP; labels only predicted get 0.
    Predictions are ranked by confidence (ties: shape id, then input order)
    and each is matched to the unmatched same-label, same-shape ground-truth
    mask of highest IoU; it is a true positive iff that IoU exceeds the
    threshold.
    """
    _validate_instances(predicted, ground_truth)
    labels = sorted({g.label for g in ground_truth} | {p.label for p in predicted})
    out = {}
    for lab in labels:
        ps = [p for p in predicted if p.label == lab]
        gs = [g for g in ground_truth if g.label == lab]
        out[lab] = average_precision(_rank_and_match(ps, gs, iou_threshold), len(gs))
    return out


def instance_part_category_map(predictions: Mapping, ground_truths: Mapping, template: Template,
                               level: int, iou_threshold: float = 0.5) -> EvalReport:
    """Per-category AP across all shapes; categories without GT are skipped.

    ``predictions`` / ``ground_truths`` map shape ids to lists of
    :class:`Instance` with labels given as 1-based ids into the level cut.
    """
    names = _label_names(template, level)
    shapes = _check_shapes(predictions, ground_truths)
    preds = [p for sid in shapes for p in predictions[sid]]
    gts = [g for sid in shapes for g in ground_truths[sid]]
    ap = instance_ap(preds, gts, iou_threshold)
    rep = EvalReport("instance_part_category_map", "part_category")
    for lab, value in ap.items():
        n_gt = sum(1 for g in gts if g.label == lab)
        if n_gt == 0:
            continue
        key = (level, names[lab - 1])
        rep.per_part_category[key] = value
        rep.counts[key] = {"gt": n_gt, "pred": sum(1 for p in preds if p.label == lab)}
    return rep.finalize()


def instance_shape_map(predictions: Mapping, ground_truths: Mapping, template: Template,
                       level: int, iou_threshold: float = 0.5) -> EvalReport:
    _label_names(template, level)
    rep = EvalReport("instance_shape_map", "shape")
    for sid in _check_shapes(predictions, ground_truths):
        ap = instance_ap(predictions[sid], ground_truths[sid], iou_threshold)
        if not ap:
            continue
        rep.per_shape[(level, sid)] = float(np.mean(list(ap.values())))
        rep.counts[(level, sid)] = {"categories": len(ap), "gt": len(ground_truths[sid])}
    return rep.finalize()


def gt_instances(shape_id: str, labels) -> list[Instance]:
    """Ground-truth instances of one shape from its LevelLabels."""
    masks = labels.instance_masks().astype(bool)
    sem = labels.instance_labels()
    return [Instance(shape_id, masks[i], int(sem[i])) for i in range(len(sem))]
