import json

import numpy as np
import pytest

from partseg import cli
from partseg.annotation import flatten, point_paths
from partseg.dataset import Dataset
from partseg.errors import ConfigError, FormatError
from partseg.infer import PathPrediction, save_paths
from partseg.metrics import gt_instances


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def chairs(tmp_path_factory):
    root = tmp_path_factory.mktemp("chairs") / "data"
    assert run("gen-synthetic", "--count", 10, "--seed", 3, "--points", 128, "--out", root) == 0
    return root


def write_gt_predictions(ds, out, split="test"):
    """Ground truth written in the prediction formats, at every level the template has."""
    for lv in ds.template.levels():
        d = out / f"level_{lv}"
        d.mkdir(parents=True, exist_ok=True)
        for sid in ds.ids(split):
            labels = flatten(ds.annotation(sid), ds.template, lv)
            (d / f"{sid}.sem.txt").write_text("".join(f"{v}\n" for v in labels.semantic))
            masks = [{"points": np.nonzero(g.mask)[0].tolist(), "confidence": 1.0, "semantic": g.label}
                     for g in gt_instances(sid, labels)]
            (d / f"{sid}.ins.json").write_text(json.dumps({"masks": masks}))
    hier = out / "paths"
    hier.mkdir(parents=True, exist_ok=True)
    for sid in ds.ids(split):
        save_paths(PathPrediction(point_paths(ds.annotation(sid))), hier / f"{sid}.paths.json")


# ---------------------------------------------------------------- data commands

def test_gen_synthetic_deterministic(tmp_path, chairs):
    again = tmp_path / "again"
    assert run("gen-synthetic", "--count", 10, "--seed", 3, "--points", 128, "--out", again) == 0
    a = sorted(p.relative_to(chairs) for p in chairs.rglob("*") if p.is_file())
    b = sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    assert a == b
    for rel in a:
        if rel.name != "resolved_config.json":
            assert (chairs / rel).read_bytes() == (again / rel).read_bytes(), rel
    m = json.loads((chairs / "manifest.json").read_text())
    assert (len(m["train"]), len(m["val"]), len(m["test"])) == (7, 1, 2)


def test_fps_command(tmp_path, chairs):
    cloud = next((chairs / "clouds").iterdir())
    out, idx = tmp_path / "s.pnpc", tmp_path / "idx.txt"
    assert run("fps", cloud, "--points", 16, "--out", out, "--indices", idx) == 0
    lines = idx.read_text().split()
    assert len(lines) == 16 and lines[0] == "0"


def test_validate_and_strict(tmp_path, chairs, capsys):
    ann = sorted((chairs / "annotations").iterdir())[0]
    tmpl = chairs / "template.json"
    assert run("validate", ann, "--template", tmpl, "--strict") == 0
    doc = json.loads(ann.read_text())
    doc["root"]["children"][0]["node"] = 9999
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run("validate", bad, "--template", tmpl) == 0
    assert run("validate", bad, "--template", tmpl, "--strict") == 1


def test_consistency_identical(tmp_path, chairs, capsys):
    ann = sorted((chairs / "annotations").iterdir())[0]
    out = tmp_path / "c.json"
    assert run("consistency", ann, ann, "--template", chairs / "template.json", "--out", out) == 0
    assert json.loads(out.read_text())["pairs"][0]["consistency"] == 1.0
    assert run("consistency", ann, "--template", chairs / "template.json") == 2


# ---------------------------------------------------------------- config

def test_resolved_defaults_and_precedence(tmp_path):
    r = cli.resolve_config()
    assert (r["lambda_ins"], r["lambda_other"], r["lambda_conf"], r["lambda_l21"]) == (1.0, 1.0, 1.0, 0.1)
    assert r["level"] == 3 and r["normalize"] is True
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nepochs = 7\nlr=0.01\n")
    r = cli.resolve_config(cfg, ["epochs=9"], epochs=None)
    assert r["epochs"] == 9 and r["lr"] == 0.01
    assert cli.resolve_config(cfg, ["epochs=9"], epochs=11)["epochs"] == 11


def test_unknown_key_rejected_before_training(tmp_path, chairs, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs=1\nlearning_rate=3\n")
    with pytest.raises(ConfigError, match="c.txt:2"):
        cli.resolve_config(cfg)
    out = tmp_path / "model"
    assert run("train", "--data", chairs, "--out", out, "--config", cfg) == 1
    assert "learning_rate" in capsys.readouterr().err
    assert not out.exists()


def test_bad_level_for_lamp(tmp_path):
    data = tmp_path / "lamps"
    assert run("gen-synthetic", "--category", "lamp", "--count", 4, "--points", 64, "--out", data) == 0
    assert run("train", "--data", data, "--out", tmp_path / "m", "--level", 2) == 1


# ---------------------------------------------------------------- evaluation

def test_eval_ground_truth_is_perfect(tmp_path, chairs, capsys):
    ds = Dataset.open(chairs)
    write_gt_predictions(ds, tmp_path / "pred")
    capsys.readouterr()
    assert run("eval-sem", "--pred", tmp_path / "pred", "--data", chairs, "--out", tmp_path / "s.json") == 0
    table = capsys.readouterr().out
    for row in ("1 ", "2 ", "3 ", "Avg"):
        line = next(x for x in table.splitlines() if x.startswith(row))
        assert line.split()[1:] == ["100.0"] * 3
    sem = json.loads((tmp_path / "s.json").read_text())
    assert sem["levels"] == [1, 2, 3]
    assert all(v == 1.0 for v in sem["semantic_accuracy"].values())
    assert run("eval-ins", "--pred", tmp_path / "pred", "--data", chairs, "--out", tmp_path / "i.json") == 0
    ins = json.loads((tmp_path / "i.json").read_text())
    assert all(r["aggregates"]["avg"] == 1.0 for r in ins["part_category"].values())
    assert run("eval-hier", "--pred", tmp_path / "pred" / "paths", "--data", chairs,
               "--out", tmp_path / "h.json") == 0
    assert json.loads((tmp_path / "h.json").read_text())["part_category"]["aggregates"]["avg"] == 1.0


def test_eval_lamp_missing_level_is_dash(tmp_path, capsys):
    data = tmp_path / "lamps"
    assert run("gen-synthetic", "--category", "lamp", "--count", 10, "--points", 64, "--out", data) == 0
    write_gt_predictions(Dataset.open(data), tmp_path / "pred")
    capsys.readouterr()
    assert run("eval-sem", "--pred", tmp_path / "pred", "--data", data, "--out", tmp_path / "s.json") == 0
    rows = {ln.split()[0]: ln.split()[1:] for ln in capsys.readouterr().out.splitlines()[2:]}
    assert rows["2"] == [cli.DASH] * 3
    assert rows["1"] == ["100.0"] * 3 and rows["Avg"] == ["100.0"] * 3


def test_format_errors_carry_line(tmp_path, chairs, capsys):
    ds = Dataset.open(chairs)
    sid = ds.ids("test")[0]
    pred = tmp_path / "pred" / "level_1"
    write_gt_predictions(ds, tmp_path / "pred")
    lines = (pred / f"{sid}.sem.txt").read_text().splitlines()
    lines[4] = "chair"
    (pred / f"{sid}.sem.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError) as e:
        cli.read_semantic(pred / f"{sid}.sem.txt", len(lines))
    assert "5" in str(e.value)
    assert run("eval-sem", "--pred", tmp_path / "pred", "--data", chairs, "--level", 1,
               "--out", tmp_path / "s.json") == 1
    (pred / f"{sid}.ins.json").write_text('{"masks": [\n{"points": [1,}\n]}')
    with pytest.raises(FormatError) as e:
        cli.read_instances(pred / f"{sid}.ins.json", sid, 128)
    assert "2" in str(e.value)


# ---------------------------------------------------------------- training

TRAIN_ARGS = ("--epochs", 2, "--points", 64, "--level", 1, "--k-masks", 8, "--set", "batch=4")


def test_train_predict_and_resume(tmp_path, chairs):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("train", "--data", chairs, "--out", full, *TRAIN_ARGS) == 0
    for name in ("resolved_config.json", "checkpoint.pskw", "train_log.json", "val_report.json"):
        assert (full / name).exists()
    assert run("train", "--data", chairs, "--out", part, "--epochs", 1, "--points", 64, "--level", 1,
               "--k-masks", 8, "--set", "batch=4") == 0
    assert run("train", "--data", chairs, "--out", part, *TRAIN_ARGS, "--resume") == 0
    for name in ("checkpoint.pskw", "train_log.json", "val_report.json"):
        assert (full / name).read_bytes() == (part / name).read_bytes(), name
    pred = tmp_path / "pred"
    assert run("predict", "--model", full, "--out", pred) == 0
    ds = Dataset.open(chairs)
    for sid in ds.ids("test"):
        labels = cli.read_semantic(pred / "level_1" / f"{sid}.sem.txt", 128)
        assert labels.min() >= 1
        assert (pred / "level_1" / f"{sid}.ins.json").exists()


def test_manifest_exclusion_list(tmp_path, chairs):
    import shutil
    data = tmp_path / "data"
    shutil.copytree(chairs, data)
    ds = Dataset.open(data)
    sid = ds.ids("all")[0]
    leaf = next(n for n in ds.template.cut(3) if (flatten(ds.annotation(sid), ds.template, 3).semantic
                                                  == ds.template.cut(3).index(n) + 1).any())
    m = json.loads((data / "manifest.json").read_text())
    m["exclude"] = [leaf]
    (data / "manifest.json").write_text(json.dumps(m))
    labels = flatten(Dataset.open(data).annotation(sid), ds.template, 3).semantic
    assert not (labels == ds.template.cut(3).index(leaf) + 1).any()
