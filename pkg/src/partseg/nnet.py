"""A small PointNet-style segmentation network with hand-written gradients.

Per-point shared MLP -> max-pooled global feature -> per-point decoder with
three heads: semantic logits, K+1 softmax masks (last one is "other") and K
mask confidences computed from the pooled feature.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .annotation import LevelLabels
from .errors import ConfigError, FormatError, InvalidArgumentError
from .matching import Assignment, match_instances

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PSKW"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class NetConfig:
    n_semantic: int
    k_masks: int = 24
    encoder: tuple = (64, 128)
    decoder: tuple = (128,)
    seed: int = 0


def layer_names(cfg: NetConfig) -> list[str]:
    names = [f"enc{i}" for i in range(len(cfg.encoder))]
    names += [f"dec{i}" for i in range(len(cfg.decoder))]
    names.append("sem")
    if cfg.k_masks > 0:
        names += ["mask", "conf"]
    return names


def init_params(cfg: NetConfig) -> dict:
    if cfg.n_semantic < 1:
        raise ConfigError("need at least one semantic label")
    if cfg.k_masks < 0:
        raise ConfigError("k_masks must be non-negative")
    rng = np.random.default_rng(cfg.seed)
    shapes = []
    width = 3
    for i, w in enumerate(cfg.encoder):
        shapes.append((f"enc{i}", width, w, True))
        width = w
    feat = width
    width = 2 * feat
    for i, w in enumerate(cfg.decoder):
        shapes.append((f"dec{i}", width, w, True))
        width = w
    shapes.append(("sem", width, cfg.n_semantic, False))
    if cfg.k_masks > 0:
        shapes.append(("mask", width, cfg.k_masks + 1, False))
        shapes.append(("conf", feat, cfg.k_masks, False))
    params = {}
    for name, fan_in, fan_out, hidden in shapes:
        scale = np.sqrt((2.0 if hidden else 1.0) / fan_in)
        params[f"{name}.W"] = rng.normal(0.0, scale, size=(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)
    return params


def config_from_params(params: dict, seed: int = 0) -> NetConfig:
    enc = []
    i = 0
    while f"enc{i}.W" in params:
        enc.append(params[f"enc{i}.W"].shape[1])
        i += 1
    dec = []
    i = 0
    while f"dec{i}.W" in params:
        dec.append(params[f"dec{i}.W"].shape[1])
        i += 1
    k = params["mask.W"].shape[1] - 1 if "mask.W" in params else 0
    return NetConfig(params["sem.W"].shape[1], k, tuple(enc), tuple(dec), seed)


# ---------------------------------------------------------------- forward

@dataclass
class NetworkOutput:
    semantic_logits: np.ndarray
    mask_probabilities: Optional[np.ndarray]
    confidences: Optional[np.ndarray]

    @property
    def k_masks(self) -> int:
        return 0 if self.mask_probabilities is None else self.mask_probabilities.shape[1] - 1


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(x):
    s = x - x.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def forward(params: dict, points, return_cache: bool = False):
    x = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) < 1:
        raise ConfigError(f"expected an (N, 3) point array, got {x.shape}")
    cache = {"x": x, "enc": [], "dec": []}
    h = x
    i = 0
    while f"enc{i}.W" in params:
        a = h @ params[f"enc{i}.W"] + params[f"enc{i}.b"]
        cache["enc"].append((h, a))
        h = np.maximum(a, 0.0)
        i += 1
    feat = h
    arg = np.argmax(feat, axis=0)
    g = feat[arg, np.arange(feat.shape[1])]
    cache["feat"], cache["arg"], cache["g"] = feat, arg, g
    h = np.concatenate([feat, np.broadcast_to(g, feat.shape)], axis=1)
    i = 0
    while f"dec{i}.W" in params:
        a = h @ params[f"dec{i}.W"] + params[f"dec{i}.b"]
        cache["dec"].append((h, a))
        h = np.maximum(a, 0.0)
        i += 1
    cache["top"] = h
    sem = h @ params["sem.W"] + params["sem.b"]
    probs = conf = None
    if "mask.W" in params:
        probs = _softmax(h @ params["mask.W"] + params["mask.b"])
        conf = _sigmoid(g @ params["conf.W"] + params["conf.b"])
        if params["conf.W"].shape[1] != probs.shape[1] - 1:
            raise ConfigError("confidence head and mask head disagree on K")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-6:
            raise FloatingPointError("mask probabilities do not sum to one")
    out = NetworkOutput(sem, probs, conf)
    return (out, cache) if return_cache else out


# ---------------------------------------------------------------- loss

@dataclass(frozen=True)
class LossWeights:
    ins: float = 1.0
    other: float = 1.0
    conf: float = 1.0
    l21: float = 0.1
    # regress unmatched mask confidences to zero
    conf_unmatched: bool = True


@dataclass
class LossBreakdown:
    total: float
    l_sem: float
    l_ins: float
    l_other: float
    l_conf: float
    l_l21: float
    matching: Optional[Assignment] = None

    def terms(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "matching"}


@dataclass
class Targets:
    """Training targets for one shape.

    ``semantic`` is N x S: one-hot rows for flat labels, multi-hot rows for
    path (multi-label) training, zero rows for ignored points.
    """

    semantic: np.ndarray
    instance_masks: np.ndarray  # T x N binary
    other_mask: np.ndarray  # N binary


def targets_from_labels(labels: LevelLabels) -> Targets:
    n = len(labels.semantic)
    sem = np.zeros((n, labels.n_labels))
    lab = labels.semantic > 0
    sem[np.nonzero(lab)[0], labels.semantic[lab] - 1] = 1.0
    return Targets(sem, labels.instance_masks(), (~lab).astype(np.float64))


def _iou_and_grad(p, y):
    inter = float(p @ y)
    union = float(p.sum() + y.sum()) - inter
    if union <= 0:
        return 0.0, np.zeros_like(p)
    return inter / union, (y * union - inter * (1.0 - y)) / union**2


def _loss(out: NetworkOutput, tg: Targets, w: LossWeights, truncate: bool = False,
          matching: Optional[Assignment] = None, conf_targets=None):
    """Loss terms and gradients w.r.t. (semantic logits, mask probs, confidences).

    ``conf_targets`` overrides the measured IoUs the matched confidences
    regress to (they never carry gradient either way).
    """
    sem = out.semantic_logits
    n = sem.shape[0]
    if tg.semantic.shape != sem.shape:
        raise ConfigError(f"semantic targets {tg.semantic.shape} do not fit logits {sem.shape}")
    weight = tg.semantic.sum(axis=1)
    n_lab = int(np.count_nonzero(weight))
    if n_lab:
        l_sem = float(-(tg.semantic * _log_softmax(sem)).sum() / n_lab)
        d_sem = (weight[:, None] * _softmax(sem) - tg.semantic) / n_lab
    else:
        l_sem, d_sem = 0.0, np.zeros_like(sem)

    l_ins = l_other = l_conf = l_l21 = 0.0
    d_p = d_c = None
    probs, conf = out.mask_probabilities, out.confidences
    if probs is not None:
        k = probs.shape[1] - 1
        d_p = np.zeros_like(probs)
        d_c = np.zeros_like(conf)
        gt = tg.instance_masks
        matched_cols = []
        if len(gt):
            if matching is None:
                matching, rows = match_instances(probs, gt, truncate=truncate)
            else:
                rows = np.arange(len(gt)) if len(matching.mapping) == len(gt) else None
                if rows is None:
                    raise InvalidArgumentError("fixed matching does not cover the ground truth")
            t = len(matching.mapping)
            for i in range(t):
                j = matching.mapping[i]
                iou, grad = _iou_and_grad(probs[:, j], gt[rows[i]])
                l_ins -= iou / t
                d_p[:, j] -= w.ins * grad / t
                target = iou if conf_targets is None else conf_targets[i]
                l_conf += (conf[j] - target) ** 2 / t
                d_c[j] += w.conf * 2.0 * (conf[j] - target) / t
                matched_cols.append(j)
        if w.conf_unmatched:
            free = np.ones(k, dtype=bool)
            free[matched_cols] = False
            un = np.nonzero(free)[0]
            if len(un):
                l_conf += float(np.sum(conf[un] ** 2) / len(un))
                d_c[un] += w.conf * 2.0 * conf[un] / len(un)
        if tg.other_mask.any():
            iou, grad = _iou_and_grad(probs[:, k], tg.other_mask)
            l_other = -iou
            d_p[:, k] -= w.other * grad
        norms = np.sqrt((probs**2).sum(axis=0))
        root_n = np.sqrt(n)
        l_l21 = float(norms.sum() / root_n)
        safe = np.where(norms > 0, norms, 1.0)
        d_p += w.l21 * np.where(norms > 0, probs / safe, 0.0) / root_n
    total = l_sem + w.ins * l_ins + w.other * l_other + w.conf * l_conf + w.l21 * l_l21
    return LossBreakdown(total, l_sem, l_ins, l_other, l_conf, l_l21, matching), (d_sem, d_p, d_c)


def loss_value(params: dict, points, targets: Targets, weights: LossWeights = LossWeights(),
               matching: Optional[Assignment] = None, conf_targets=None) -> LossBreakdown:
    """Forward-only loss; used by finite-difference checks with frozen
    matching and confidence targets."""
    out = forward(params, points)
    return _loss(out, targets, weights, matching=matching, conf_targets=conf_targets)[0]


def matched_ious(params: dict, points, targets: Targets, matching: Assignment) -> np.ndarray:
    probs = forward(params, points).mask_probabilities
    return np.array([_iou_and_grad(probs[:, matching.mapping[i]], targets.instance_masks[i])[0]
                     for i in range(len(matching.mapping))])


def compute_loss(output: NetworkOutput, gt, weights: LossWeights = LossWeights(),
                 truncate: bool = False) -> LossBreakdown:
    tg = gt if isinstance(gt, Targets) else targets_from_labels(gt)
    return _loss(output, tg, weights, truncate)[0]


def _backprop(params, cache, d_sem, d_p, d_c, probs, conf):
    grads = {}
    top = cache["top"]
    grads["sem.W"] = top.T @ d_sem
    grads["sem.b"] = d_sem.sum(axis=0)
    d_top = d_sem @ params["sem.W"].T
    d_g = np.zeros_like(cache["g"])
    if "mask.W" in params:
        d_logit = probs * (d_p - (d_p * probs).sum(axis=1, keepdims=True))
        grads["mask.W"] = top.T @ d_logit
        grads["mask.b"] = d_logit.sum(axis=0)
        d_top += d_logit @ params["mask.W"].T
        d_cz = d_c * conf * (1.0 - conf)
        grads["conf.W"] = np.outer(cache["g"], d_cz)
        grads["conf.b"] = d_cz
        d_g += params["conf.W"] @ d_cz
    d_h = d_top
    for i in reversed(range(len(cache["dec"]))):
        h_in, a = cache["dec"][i]
        d_a = d_h * (a > 0)
        grads[f"dec{i}.W"] = h_in.T @ d_a
        grads[f"dec{i}.b"] = d_a.sum(axis=0)
        d_h = d_a @ params[f"dec{i}.W"].T
    f = cache["feat"].shape[1]
    d_feat = d_h[:, :f].copy()
    d_g += d_h[:, f:].sum(axis=0)
    np.add.at(d_feat, (cache["arg"], np.arange(f)), d_g)
    d_h = d_feat
    for i in reversed(range(len(cache["enc"]))):
        h_in, a = cache["enc"][i]
        d_a = d_h * (a > 0)
        grads[f"enc{i}.W"] = h_in.T @ d_a
        grads[f"enc{i}.b"] = d_a.sum(axis=0)
        if i:
            d_h = d_a @ params[f"enc{i}.W"].T
    return grads


def loss_and_grad(params: dict, points, targets: Targets, weights: LossWeights = LossWeights(),
                  truncate: bool = False, matching: Optional[Assignment] = None):
    """(LossBreakdown, gradient dict). Matching and confidence targets are
    held constant while differentiating."""
    out, cache = forward(params, points, return_cache=True)
    br, (d_sem, d_p, d_c) = _loss(out, targets, weights, truncate, matching)
    grads = _backprop(params, cache, d_sem, d_p, d_c, out.mask_probabilities, out.confidences)
    return br, grads


def backward(params: dict, cloud, gt, weights: LossWeights = LossWeights(), truncate: bool = False):
    tg = gt if isinstance(gt, Targets) else targets_from_labels(gt)
    return loss_and_grad(params, cloud, tg, weights, truncate)[1]


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 100
    batch: int = 8
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_ins: float = 1.0
    lambda_other: float = 1.0
    lambda_conf: float = 1.0
    lambda_l21: float = 0.1
    conf_unmatched: bool = True
    k_masks: int = 24
    points: int = 1024
    encoder: tuple = (64, 128)
    decoder: tuple = (128,)
    patience: int = 0
    truncate: bool = False

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ins, self.lambda_other, self.lambda_conf, self.lambda_l21,
                           self.conf_unmatched)


@dataclass
class Sample:
    shape_id: str
    points: np.ndarray
    targets: Targets


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    log: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params):
        return cls(params, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: TrainState, grads: dict, cfg: TrainConfig) -> None:
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k in state.params:
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        state.params[k] = state.params[k] - cfg.lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + cfg.eps)


def _mean_terms(rows: list) -> dict:
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def evaluate_loss(params, samples: Sequence[Sample], cfg: TrainConfig) -> dict:
    rows, correct, labeled = [], 0, 0
    for s in samples:
        out = forward(params, s.points)
        br, _ = _loss(out, s.targets, cfg.weights(), cfg.truncate)
        rows.append(br.terms())
        lab = s.targets.semantic.sum(axis=1) > 0
        pred = np.argmax(out.semantic_logits, axis=1)
        correct += int(np.sum(s.targets.semantic[np.nonzero(lab)[0], pred[lab]] > 0))
        labeled += int(lab.sum())
    res = _mean_terms(rows)
    res["semantic_accuracy"] = correct / labeled if labeled else 0.0
    return res


def train(cfg: TrainConfig, samples: Sequence[Sample], n_semantic: int,
          val: Sequence[Sample] = (), state: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Mini-batch Adam. Deterministic given ``cfg.seed``; ``state`` resumes."""
    if not samples:
        raise InvalidArgumentError("empty training set")
    if cfg.batch < 1 or cfg.epochs < 0 or cfg.lr <= 0:
        raise ConfigError("batch >= 1, epochs >= 0 and lr > 0 are required")
    if state is None:
        net = NetConfig(n_semantic, cfg.k_masks, tuple(cfg.encoder), tuple(cfg.decoder), cfg.seed)
        state = TrainState.fresh(init_params(net))
    weights = cfg.weights()
    best, best_params, stale = np.inf, None, 0
    while state.epoch < cfg.epochs:
        order = np.random.default_rng([cfg.seed, state.epoch]).permutation(len(samples))
        rows = []
        for start in range(0, len(order), cfg.batch):
            batch = [samples[i] for i in order[start:start + cfg.batch]]
            acc = None
            for s in batch:
                br, g = loss_and_grad(state.params, s.points, s.targets, weights, cfg.truncate)
                rows.append(br.terms())
                if acc is None:
                    acc = g
                else:
                    for k in acc:
                        acc[k] += g[k]
            for k in acc:
                acc[k] /= len(batch)
            adam_step(state, acc, cfg)
        state.epoch += 1
        entry = {"epoch": state.epoch, "train": _mean_terms(rows)}
        if val:
            entry["val"] = evaluate_loss(state.params, val, cfg)
        state.log.append(entry)
        log.info("epoch %d %s", state.epoch, entry)
        if on_epoch is not None:
            on_epoch(state)
        if val and cfg.patience > 0:
            score = entry["val"]["total"]
            if score < best - 1e-12:
                best, stale = score, 0
                best_params = {k: p.copy() for k, p in state.params.items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop after %d stale epochs", stale)
                    state.params = best_params
                    break
    return state


# ---------------------------------------------------------------- prediction

@dataclass
class InstancePredictionSet:
    """Binarized instance masks (point index arrays) with confidences and
    1-based semantic labels."""

    masks: list
    confidences: list
    labels: list
    channels: list

    def to_dict(self) -> dict:
        return {"masks": [
            {"points": [int(i) for i in m], "confidence": float(c), "semantic": int(s)}
            for m, c, s in zip(self.masks, self.confidences, self.labels)
        ]}


def predict_semantic(params, points) -> np.ndarray:
    out = forward(params, points)
    return np.argmax(out.semantic_logits, axis=1) + 1


def binarize(output: NetworkOutput, min_points: int = 1) -> InstancePredictionSet:
    probs = output.mask_probabilities
    k = probs.shape[1] - 1
    owner = np.argmax(probs, axis=1)
    sem = _softmax(output.semantic_logits)
    masks, confs, labels, chans = [], [], [], []
    for j in range(k):
        pts = np.nonzero(owner == j)[0]
        if len(pts) < max(min_points, 1):
            continue
        masks.append(pts)
        confs.append(float(output.confidences[j]))
        labels.append(int(np.argmax(probs[:, j] @ sem)) + 1)
        chans.append(j)
    return InstancePredictionSet(masks, confs, labels, chans)


def predict_instances(params, points, min_points: int = 1) -> InstancePredictionSet:
    return binarize(forward(params, points), min_points)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, arrays: dict) -> None:
    """Binary dump: magic, version, count, then per array name/shape/f64 data."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected PSKW", path, offset=0)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError("truncated checkpoint", path, offset=pos)
        vals = struct.unpack(fmt, raw[pos:pos + size])
        pos += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, offset=4)
    out = {}
    for _ in range(count):
        (ln,) = take("<I")
        if pos + ln > len(raw):
            raise FormatError("truncated array name", path, offset=pos)
        name = raw[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 8 * n > len(raw):
            raise FormatError("truncated array payload", path, offset=pos)
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
        pos += 8 * n
    if pos != len(raw):
        raise FormatError("trailing bytes", path, offset=pos)
    return out


def state_to_arrays(state: TrainState) -> dict:
    arrays = dict(state.params)
    for k in state.params:
        arrays[f"adam.m.{k}"] = state.m[k]
        arrays[f"adam.v.{k}"] = state.v[k]
    arrays["adam.step"] = np.array([state.step], dtype=np.float64)
    arrays["epoch"] = np.array([state.epoch], dtype=np.float64)
    return arrays


def state_from_arrays(arrays: dict) -> TrainState:
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.") and k != "epoch"}
    if "adam.step" not in arrays:
        return TrainState.fresh(params)
    return TrainState(
        params,
        {k: arrays[f"adam.m.{k}"] for k in params},
        {k: arrays[f"adam.v.{k}"] for k in params},
        int(arrays["adam.step"][0]),
        int(arrays["epoch"][0]),
    )
