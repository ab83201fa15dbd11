"""On-disk dataset layout shared by the CLI commands.

    <root>/template.json
    <root>/manifest.json          {"train": [...], "val": [...], "test": [...]}
    <root>/clouds/<shape_id>.pnpc
    <root>/annotations/<shape_id>.json
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotation import Annotation, exclude_parts, flatten, load_annotation, save_annotation, split_dataset
from .errors import FormatError, InvalidArgumentError
from .geometry import (PointCloud, SyntheticShapeSpec, furthest_point_sample, generate_synthetic,
                       normalize, read_cloud, write_pnpc)
from .nnet import Sample, targets_from_labels
from .template import Template, builtin_template, load_template, save_template

SPLIT_RATIOS = (0.7, 0.1, 0.2)


def shape_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def write_synthetic(out_dir, category: str, count: int, seed: int = 0, points: int = 1024,
                    jitter: float = 0.002) -> dict:
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    template = builtin_template(category)
    save_template(template, out / "template.json")
    ids = []
    for i in range(count):
        sid = f"{category}_{i:05d}"
        spec = SyntheticShapeSpec(category, shape_seed(seed, i), points, jitter)
        cloud, ann = generate_synthetic(spec, shape_id=sid)
        write_pnpc(cloud, out / "clouds" / f"{sid}.pnpc")
        save_annotation(ann, out / "annotations" / f"{sid}.json")
        ids.append(sid)
    train, val, test = split_dataset(ids, SPLIT_RATIOS, seed)
    manifest = {"category": category, "seed": seed, "ratios": list(SPLIT_RATIOS),
                "train": train, "val": val, "test": test}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return manifest


@dataclass
class Dataset:
    root: Path
    template: Template
    manifest: dict

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        for need in ("template.json", "manifest.json"):
            if not (root / need).exists():
                raise InvalidArgumentError(f"{root / need} does not exist")
        try:
            manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(e.msg, root / "manifest.json", line=e.lineno) from None
        return cls(root, load_template(root / "template.json"), manifest)

    def ids(self, split: str) -> list[str]:
        if split == "all":
            return sorted(self.manifest["train"] + self.manifest["val"] + self.manifest["test"])
        if split not in ("train", "val", "test"):
            raise InvalidArgumentError(f"unknown split {split!r}")
        return list(self.manifest[split])

    def cloud(self, sid: str) -> PointCloud:
        return read_cloud(self.root / "clouds" / f"{sid}.pnpc", sid)

    def annotation(self, sid: str) -> Annotation:
        a = load_annotation(self.root / "annotations" / f"{sid}.json")
        # optional manifest key: template node ids left out of targets and evaluation
        exclude = self.manifest.get("exclude")
        return exclude_parts(a, exclude) if exclude else a


def prepare_points(cloud: PointCloud, do_normalize: bool = True) -> np.ndarray:
    return (normalize(cloud) if do_normalize else cloud).points


def level_samples(ds: Dataset, ids, level: int, points: int = 0, do_normalize: bool = True):
    """Network samples for one level; clouds larger than ``points`` are
    reduced with furthest point sampling."""
    out = []
    for sid in ids:
        cloud = ds.cloud(sid)
        labels = flatten(ds.annotation(sid), ds.template, level)
        tg = targets_from_labels(labels)
        pts = prepare_points(cloud, do_normalize)
        if points and len(pts) > points:
            keep = furthest_point_sample(cloud, points)
            pts = pts[keep]
            tg = subset_targets(tg, keep)
        out.append(Sample(sid, pts, tg))
    return out


def subset_targets(tg, keep):
    from .nnet import Targets

    masks = tg.instance_masks[:, keep]
    masks = masks[masks.sum(axis=1) > 0]
    return Targets(tg.semantic[keep], masks, tg.other_mask[keep])
