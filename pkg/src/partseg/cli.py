"""Command-line entry point: ``partseg <command> ...``."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import nnet
from .annotation import flatten, load_annotation, point_paths, validate_annotation
from .dataset import Dataset, level_samples, prepare_points, write_synthetic
from .errors import ConfigError, FormatError, InvalidArgumentError, PartSegError
from .geometry import furthest_point_sample, read_cloud, write_pnpc
from .infer import (NodeScores, bottom_up_decode, ensemble_path_vote, leaf_nodes, leaf_targets,
                    load_paths, path_targets, save_paths, top_down_decode, top_down_nodes)
from .metrics import (Instance, gt_instances, hierarchical_miou, hierarchical_shape_miou,
                      instance_part_category_map, instance_shape_map, semantic_part_category_miou,
                      semantic_shape_miou)
from .template import confusion_matrix, confusion_pairs, consistency_score, load_template

log = logging.getLogger("partseg")

CHECKPOINT = "checkpoint.pskw"
LEVELS = (1, 2, 3)
DASH = "−"

# key -> parser; these are the only keys a train config may set
TRAIN_KEYS = {
    "seed": int, "epochs": int, "batch": int, "lr": float,
    "lambda_ins": float, "lambda_other": float, "lambda_conf": float, "lambda_l21": float,
    "k_masks": int, "points": int, "patience": int, "level": int,
    "conf_unmatched": lambda s: _parse_bool(s), "normalize": lambda s: _parse_bool(s),
    "truncate": lambda s: _parse_bool(s), "min_points": int,
}
TRAIN_DEFAULTS = {"level": 3, "normalize": True, "min_points": 1}


def _parse_bool(s: str) -> bool:
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_key_values(lines, source="<args>") -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in TRAIN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = TRAIN_KEYS[key](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
    return out


def resolve_config(config_path=None, overrides=(), **flags) -> dict:
    """Defaults, then the config file, then ``--set`` pairs, then explicit flags."""
    base = {f.name: getattr(nnet.TrainConfig(), f.name) for f in fields(nnet.TrainConfig)
            if f.name in TRAIN_KEYS}
    base.update(TRAIN_DEFAULTS)
    if config_path:
        path = Path(config_path)
        base.update(parse_key_values(path.read_text(encoding="utf-8").splitlines(), str(path)))
    base.update(parse_key_values(overrides, "--set"))
    base.update({k: v for k, v in flags.items() if v is not None})
    if base["level"] not in LEVELS:
        raise ConfigError(f"level must be one of {LEVELS}")
    return base


def train_config(resolved: dict, k_masks=None) -> nnet.TrainConfig:
    cfg = {k: v for k, v in resolved.items() if k in {f.name for f in fields(nnet.TrainConfig)}}
    if k_masks is not None:
        cfg["k_masks"] = k_masks
    return nnet.TrainConfig(**cfg)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(e.msg, path, line=e.lineno, offset=e.colno) from None


def _cap_threads():
    """Limit BLAS threads to $PARTSEG_THREADS when set."""
    n = os.environ.get("PARTSEG_THREADS")
    if not n:
        return contextlib.nullcontext()
    return threadpool_limits(int(n))


# ---------------------------------------------------------------- data commands

def cmd_gen_synthetic(args) -> int:
    manifest = write_synthetic(args.out, args.category, args.count, args.seed, args.points, args.jitter)
    _write_json(Path(args.out) / "resolved_config.json", {
        "command": "gen-synthetic", "category": args.category, "count": args.count,
        "seed": args.seed, "points": args.points, "jitter": args.jitter})
    print(f"wrote {args.count} shapes to {args.out} "
          f"(train {len(manifest['train'])}, val {len(manifest['val'])}, test {len(manifest['test'])})")
    return 0


def cmd_fps(args) -> int:
    cloud = read_cloud(args.input)
    idx = furthest_point_sample(cloud, args.points)
    for target in (args.out, args.indices):
        if target:
            Path(target).parent.mkdir(parents=True, exist_ok=True)
    write_pnpc(type(cloud)(cloud.shape_id, cloud.points[idx]), args.out)
    if args.indices:
        Path(args.indices).write_text("".join(f"{i}\n" for i in idx), encoding="utf-8")
    print(f"sampled {len(idx)} of {len(cloud.points)} points -> {args.out}")
    return 0


def cmd_validate(args) -> int:
    template = load_template(args.template)
    report, total = {}, 0
    for p in args.annotations:
        a = load_annotation(p)
        problems = validate_annotation(a, template)
        report[str(p)] = problems
        total += len(problems)
        for msg in problems:
            print(f"{p}: {msg}")
    if args.out:
        _write_json(args.out, {"violations": report, "count": total})
    print(f"{total} violation(s) in {len(args.annotations)} annotation(s)")
    return 1 if (args.strict and total) else 0


def cmd_consistency(args) -> int:
    template = load_template(args.template)
    anns = [load_annotation(p) for p in args.annotations]
    pairs = []
    for i in range(len(anns)):
        for j in range(i + 1, len(anns)):
            cm = confusion_matrix(anns[i], anns[j], template, symmetric=args.symmetric)
            pairs.append({
                "a": str(args.annotations[i]), "b": str(args.annotations[j]),
                "labels": list(cm.labels), "counts": cm.counts.astype(int).tolist(),
                "consistency": consistency_score(cm),
                "confusions": [[x, y, float(v)] for x, y, v in confusion_pairs(cm)],
            })
            print(f"{args.annotations[i]} vs {args.annotations[j]}: consistency {pairs[-1]['consistency']:.4f}")
    if args.out:
        _write_json(args.out, {"symmetric": args.symmetric, "pairs": pairs})
    return 0


# ---------------------------------------------------------------- training

def _save_state(out: Path, state: nnet.TrainState) -> None:
    nnet.save_checkpoint(out / CHECKPOINT, nnet.state_to_arrays(state))
    _write_json(out / "train_log.json", state.log)


def _load_state(out: Path) -> nnet.TrainState:
    state = nnet.state_from_arrays(nnet.load_checkpoint(out / CHECKPOINT))
    if (out / "train_log.json").exists():
        state.log = _read_json(out / "train_log.json")[: state.epoch]
    return state


def _fit(cfg: nnet.TrainConfig, train, val, n_semantic, out: Path, resume: bool):
    state = _load_state(out) if resume and (out / CHECKPOINT).exists() else None
    if state is not None:
        log.info("resuming %s at epoch %d", out, state.epoch)
    state = nnet.train(cfg, train, n_semantic, val, state, on_epoch=lambda s: _save_state(out, s))
    _save_state(out, state)
    return state


def cmd_train(args) -> int:
    resolved = resolve_config(args.config, args.set, seed=args.seed, level=args.level,
                              k_masks=args.k_masks, points=args.points, epochs=args.epochs)
    cfg = train_config(resolved)  # config errors surface here, before any work
    ds = Dataset.open(args.data)
    level = resolved["level"]
    if level not in ds.template.levels():
        raise ConfigError(f"template {ds.template.category!r} has no level {level}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", dict(resolved, command="train", data=str(args.data)))
    n_sem = len(ds.template.cut(level))
    train = level_samples(ds, ds.ids("train"), level, cfg.points, resolved["normalize"])
    val = level_samples(ds, ds.ids("val"), level, cfg.points, resolved["normalize"])
    with _cap_threads():
        state = _fit(cfg, train, val, n_sem, out, args.resume)
        report = evaluate_model(state.params, ds, ds.ids("val"), level, resolved)
    _write_json(out / "val_report.json", report)
    print(f"trained {state.epoch} epochs; val semantic accuracy {100 * report['semantic_accuracy']:.1f}, "
          f"mAP {100 * report['instance_part_category_map']['aggregates']['avg']:.1f}"
          if report["instance_part_category_map"]["aggregates"] else f"trained {state.epoch} epochs")
    return 0


def predict_shape(params, ds: Dataset, sid: str, resolved: dict):
    pts = prepare_points(ds.cloud(sid), resolved["normalize"])
    out = nnet.forward(params, pts)
    sem = np.argmax(out.semantic_logits, axis=1) + 1
    ins = nnet.binarize(out, resolved.get("min_points", 1)) if out.k_masks else None
    return sem, ins


def evaluate_model(params, ds: Dataset, ids, level: int, resolved: dict) -> dict:
    """Semantic accuracy, part-category mIoU and instance mAP on ``ids``."""
    preds, gts, ipreds, igts = {}, {}, {}, {}
    correct = labeled = 0
    for sid in ids:
        labels = flatten(ds.annotation(sid), ds.template, level)
        sem, ins = predict_shape(params, ds, sid, resolved)
        preds[sid], gts[sid] = sem, labels.semantic
        lab = labels.semantic > 0
        correct += int(np.sum(sem[lab] == labels.semantic[lab]))
        labeled += int(lab.sum())
        if ins is not None:
            ipreds[sid] = _instances_from_set(sid, ins, len(sem))
            igts[sid] = gt_instances(sid, labels)
    out = {
        "level": level, "shapes": len(ids),
        "semantic_accuracy": correct / labeled if labeled else 0.0,
        "semantic_part_category_miou": semantic_part_category_miou(preds, gts, ds.template, level).to_dict(),
    }
    if ipreds:
        out["instance_part_category_map"] = instance_part_category_map(ipreds, igts, ds.template, level).to_dict()
    return out


def _instances_from_set(sid, ins: nnet.InstancePredictionSet, n_points: int):
    res = []
    for pts, c, lab in zip(ins.masks, ins.confidences, ins.labels):
        m = np.zeros(n_points, dtype=bool)
        m[pts] = True
        res.append(Instance(sid, m, int(lab), float(c)))
    return res


def _model_dir(path) -> tuple[Path, dict, dict]:
    path = Path(path)
    resolved = _read_json(path / "resolved_config.json")
    params = nnet.state_from_arrays(nnet.load_checkpoint(path / CHECKPOINT)).params
    return path, resolved, params


def cmd_predict(args) -> int:
    _, resolved, params = _model_dir(args.model)
    ds = Dataset.open(args.data or resolved["data"])
    level = resolved["level"]
    out = Path(args.out) / f"level_{level}"
    out.mkdir(parents=True, exist_ok=True)
    ids = ds.ids(args.split)
    with _cap_threads():
        for sid in ids:
            sem, ins = predict_shape(params, ds, sid, resolved)
            (out / f"{sid}.sem.txt").write_text("".join(f"{int(v)}\n" for v in sem), encoding="utf-8")
            if ins is not None:
                _write_json(out / f"{sid}.ins.json", ins.to_dict())
    print(f"wrote predictions for {len(ids)} shapes to {out}")
    return 0


# ---------------------------------------------------------------- evaluation

def read_semantic(path, n_points: int) -> np.ndarray:
    path = Path(path)
    vals = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        s = line.strip()
        try:
            vals.append(int(s))
        except ValueError:
            raise FormatError(f"expected an integer label, got {s!r}", path, line=lineno) from None
    if len(vals) != n_points:
        raise FormatError(f"{len(vals)} labels for {n_points} points", path, line=len(vals))
    return np.asarray(vals, dtype=np.int64)


def read_instances(path, sid: str, n_points: int) -> list:
    doc = _read_json(path)
    try:
        res = []
        for i, m in enumerate(doc["masks"]):
            mask = np.zeros(n_points, dtype=bool)
            pts = np.asarray(m["points"], dtype=np.int64)
            if pts.size and (pts.min() < 0 or pts.max() >= n_points):
                raise FormatError(f"mask {i}: point index out of range", path)
            mask[pts] = True
            res.append(Instance(sid, mask, int(m["semantic"]), float(m["confidence"])))
        return res
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad instance prediction: {e}", path) from None


def _levels_to_eval(ds: Dataset, pred_dir: Path, level):
    levels = [level] if level else [lv for lv in LEVELS if (pred_dir / f"level_{lv}").is_dir()]
    return [lv for lv in levels if lv in ds.template.levels()]


def _fmt(v) -> str:
    return DASH if v is None else f"{100 * v:.1f}"


def print_table(title: str, columns: dict) -> None:
    """Rows 1/2/3/Avg; ``columns`` maps header -> {level: value or None}."""
    heads = list(columns)
    print(title)
    print("level  " + "  ".join(f"{h:>12}" for h in heads))
    for lv in LEVELS:
        print(f"{lv:<5}  " + "  ".join(f"{_fmt(columns[h].get(lv)):>12}" for h in heads))
    avg = []
    for h in heads:
        vals = [v for v in columns[h].values() if v is not None]
        avg.append(_fmt(float(np.mean(vals)) if vals else None))
    print("Avg    " + "  ".join(f"{a:>12}" for a in avg))


def _level_cells(reports: dict) -> dict:
    return {lv: rep.level_score(lv) for lv, rep in reports.items()}


def cmd_eval_sem(args) -> int:
    ds = Dataset.open(args.data)
    pred_dir = Path(args.pred)
    ids = ds.ids(args.split)
    cat_reports, shape_reports, acc = {}, {}, {}
    for lv in _levels_to_eval(ds, pred_dir, args.level):
        preds, gts = {}, {}
        correct = labeled = 0
        for sid in ids:
            labels = flatten(ds.annotation(sid), ds.template, lv)
            preds[sid] = read_semantic(pred_dir / f"level_{lv}" / f"{sid}.sem.txt", len(labels.semantic))
            gts[sid] = labels.semantic
            lab = labels.semantic > 0
            correct += int(np.sum(preds[sid][lab] == labels.semantic[lab]))
            labeled += int(lab.sum())
        cat_reports[lv] = semantic_part_category_miou(preds, gts, ds.template, lv, args.per_shape_average)
        shape_reports[lv] = semantic_shape_miou(preds, gts, ds.template, lv)
        acc[lv] = correct / labeled if labeled else None
    doc = {"mode": "sem", "split": args.split, "levels": sorted(cat_reports),
           "part_category": {str(k): v.to_dict() for k, v in cat_reports.items()},
           "shape": {str(k): v.to_dict() for k, v in shape_reports.items()},
           "semantic_accuracy": {str(k): v for k, v in acc.items()}}
    _write_json(args.out, doc)
    print_table(f"semantic segmentation ({ds.template.category})", {
        "part-cat mIoU": _level_cells(cat_reports), "shape mIoU": _level_cells(shape_reports),
        "accuracy": acc})
    return 0


def cmd_eval_ins(args) -> int:
    ds = Dataset.open(args.data)
    pred_dir = Path(args.pred)
    ids = ds.ids(args.split)
    cat_reports, shape_reports = {}, {}
    for lv in _levels_to_eval(ds, pred_dir, args.level):
        preds, gts = {}, {}
        for sid in ids:
            labels = flatten(ds.annotation(sid), ds.template, lv)
            preds[sid] = read_instances(pred_dir / f"level_{lv}" / f"{sid}.ins.json", sid, len(labels.semantic))
            gts[sid] = gt_instances(sid, labels)
        cat_reports[lv] = instance_part_category_map(preds, gts, ds.template, lv, args.iou_threshold)
        shape_reports[lv] = instance_shape_map(preds, gts, ds.template, lv, args.iou_threshold)
    doc = {"mode": "ins", "split": args.split, "iou_threshold": args.iou_threshold,
           "levels": sorted(cat_reports),
           "part_category": {str(k): v.to_dict() for k, v in cat_reports.items()},
           "shape": {str(k): v.to_dict() for k, v in shape_reports.items()}}
    _write_json(args.out, doc)
    print_table(f"instance segmentation mAP@{args.iou_threshold} ({ds.template.category})", {
        "part-cat mAP": _level_cells(cat_reports), "shape mAP": _level_cells(shape_reports)})
    return 0


def cmd_eval_hier(args) -> int:
    ds = Dataset.open(args.data)
    pred_dir = Path(args.pred)
    preds, gts = {}, {}
    for sid in ds.ids(args.split):
        gts[sid] = point_paths(ds.annotation(sid))
        preds[sid] = load_paths(pred_dir / f"{sid}.paths.json").paths
    cat = hierarchical_miou(preds, gts, ds.template)
    shape = hierarchical_shape_miou(preds, gts, ds.template)
    _write_json(args.out, {"mode": "hier", "split": args.split,
                           "part_category": cat.to_dict(), "shape": shape.to_dict()})
    print(f"hierarchical segmentation ({ds.template.category})")
    print(f"part-category mIoU {_fmt(cat.avg)}   shape mIoU {_fmt(shape.avg)}")
    return 0


# ---------------------------------------------------------------- hierarchical training

def _hier_samples(ds: Dataset, ids, resolved: dict, target_fn):
    """Semantic-only samples with rows from ``target_fn(annotation, template)``."""
    out = []
    for sid in ids:
        cloud = ds.cloud(sid)
        sem, _ = target_fn(ds.annotation(sid), ds.template)
        pts = prepare_points(cloud, resolved["normalize"])
        if resolved["points"] and len(pts) > resolved["points"]:
            keep = furthest_point_sample(cloud, resolved["points"])
            pts, sem = pts[keep], sem[keep]
        out.append(_semantic_only(sid, pts, sem))
    return out


def _semantic_only(sid, pts, sem) -> nnet.Sample:
    n = len(pts)
    return nnet.Sample(sid, pts, nnet.Targets(sem, np.zeros((0, n)), np.zeros(n)))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_hierarchical(ds: Dataset, resolved: dict, method: str, out: Path, resume: bool = False):
    """Train the networks of one strategy; returns a predictor sid -> PathPrediction."""
    cfg = train_config(resolved, k_masks=0)
    tr, va = ds.ids("train"), ds.ids("val")
    template = ds.template
    if method in ("bottom-up", "top-down"):
        fn = leaf_targets if method == "bottom-up" else path_targets
        nodes = leaf_nodes(template) if method == "bottom-up" else top_down_nodes(template)
        train = _hier_samples(ds, tr, resolved, fn)
        val = _hier_samples(ds, va, resolved, fn)
        sub = out / method
        sub.mkdir(parents=True, exist_ok=True)
        params = _fit(cfg, train, val, len(nodes), sub, resume).params
        decode = bottom_up_decode if method == "bottom-up" else top_down_decode

        def predict(sid):
            pts = prepare_points(ds.cloud(sid), resolved["normalize"])
            probs = _softmax(nnet.forward(params, pts).semantic_logits)
            return decode(NodeScores(probs, nodes), template)

        return predict
    if method != "ensemble":
        raise InvalidArgumentError(f"unknown method {method!r}")
    nets = {}
    for lv in template.levels():
        train = level_samples(ds, tr, lv, cfg.points, resolved["normalize"])
        val = level_samples(ds, va, lv, cfg.points, resolved["normalize"])
        train = [_semantic_only(s.shape_id, s.points, s.targets.semantic) for s in train]
        val = [_semantic_only(s.shape_id, s.points, s.targets.semantic) for s in val]
        sub = out / f"ensemble_level_{lv}"
        sub.mkdir(parents=True, exist_ok=True)
        nets[lv] = _fit(cfg, train, val, len(template.cut(lv)), sub, resume).params

    def predict(sid):
        pts = prepare_points(ds.cloud(sid), resolved["normalize"])
        scores = {lv: NodeScores(_softmax(nnet.forward(p, pts).semantic_logits), template.cut(lv))
                  for lv, p in nets.items()}
        return ensemble_path_vote(scores, template)

    return predict


def cmd_train_hier(args) -> int:
    resolved = resolve_config(args.config, args.set, seed=args.seed, points=args.points, epochs=args.epochs)
    train_config(resolved, k_masks=0)
    ds = Dataset.open(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json",
                dict(resolved, command="train-hier", method=args.method, data=str(args.data), k_masks=0))
    paths_dir = out / "paths"
    paths_dir.mkdir(exist_ok=True)
    ids = ds.ids(args.split)
    with _cap_threads():
        predict = train_hierarchical(ds, resolved, args.method, out, args.resume)
        for sid in ids:
            save_paths(predict(sid), paths_dir / f"{sid}.paths.json")
    print(f"{args.method}: wrote path predictions for {len(ids)} shapes to {paths_dir}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partseg", description="Hierarchical part segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    g.add_argument("--category", choices=("chair", "lamp"), default="chair")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=1024)
    g.add_argument("--jitter", type=float, default=0.002)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synthetic)

    f = sub.add_parser("fps", help="furthest point sampling of one cloud")
    f.add_argument("input")
    f.add_argument("--points", type=int, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--indices", help="also write the selected indices, one per line")
    f.set_defaults(func=cmd_fps)

    def train_flags(t):
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--config", help="key=value file")
        t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        t.add_argument("--seed", type=int)
        t.add_argument("--points", type=int)
        t.add_argument("--epochs", type=int)
        t.add_argument("--resume", action="store_true")

    t = sub.add_parser("train", help="train the instance segmentation network")
    train_flags(t)
    t.add_argument("--level", type=int)
    t.add_argument("--k-masks", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write semantic and instance predictions")
    pr.add_argument("--model", required=True, help="directory written by train")
    pr.add_argument("--data")
    pr.add_argument("--split", default="test")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    for name, func in (("eval-sem", cmd_eval_sem), ("eval-ins", cmd_eval_ins), ("eval-hier", cmd_eval_hier)):
        e = sub.add_parser(name, help=f"evaluate {name[5:]} predictions")
        e.add_argument("--pred", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", default="test")
        e.add_argument("--out", required=True, help="JSON report path")
        if name != "eval-hier":
            e.add_argument("--level", type=int)
        if name == "eval-sem":
            e.add_argument("--per-shape-average", action="store_true")
        if name == "eval-ins":
            e.add_argument("--iou-threshold", type=float, default=0.5)
        e.set_defaults(func=func)

    h = sub.add_parser("train-hier", help="train and run a hierarchical strategy")
    train_flags(h)
    h.add_argument("--method", choices=("bottom-up", "top-down", "ensemble"), required=True)
    h.add_argument("--split", default="test")
    h.set_defaults(func=cmd_train_hier)

    v = sub.add_parser("validate", help="check annotations against a template")
    v.add_argument("annotations", nargs="+")
    v.add_argument("--template", required=True)
    v.add_argument("--out")
    v.add_argument("--strict", action="store_true", help="exit 1 when violations are found")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("consistency", help="confusion analysis between annotations of one shape")
    c.add_argument("annotations", nargs="+")
    c.add_argument("--template", required=True)
    c.add_argument("--symmetric", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_consistency)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "consistency" and len(args.annotations) < 2:
        print("error: consistency needs at least two annotations", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (PartSegError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
