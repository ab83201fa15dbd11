"""Independent reference implementations used by the tests.

Everything here is written with plain Python sets, loops and itertools so it
shares no code path with the package under test.
"""
from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np

from partseg import nnet


# ---------------------------------------------------------------- IoU

def set_iou(a: set, b: set) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def mask_to_set(mask) -> set:
    return {i for i, v in enumerate(mask) if v}


# ---------------------------------------------------------------- assignment

def best_assignment(scores):
    """(best total, lexicographically smallest optimal mapping) by enumeration."""
    scores = [list(map(float, r)) for r in scores]
    t = len(scores)
    k = len(scores[0]) if t else 0
    best, best_map = None, None
    for cols in itertools.permutations(range(k), t):
        total = sum(scores[i][c] for i, c in enumerate(cols))
        if best is None or total > best + 1e-9 * max(1.0, abs(best)):
            best, best_map = total, cols
    return best, {i: c for i, c in enumerate(best_map or ())}


# ---------------------------------------------------------------- semantic mIoU

def pooled_miou(preds: dict, gts: dict, n_labels: int):
    """Per-label pooled IoU; GT label 0 points are ignored."""
    inter = {c: 0 for c in range(1, n_labels + 1)}
    union = {c: 0 for c in range(1, n_labels + 1)}
    for sid in gts:
        keep = [i for i, g in enumerate(gts[sid]) if g > 0]
        for c in inter:
            p = {i for i in keep if preds[sid][i] == c}
            g = {i for i in keep if gts[sid][i] == c}
            inter[c] += len(p & g)
            union[c] += len(p | g)
    per = {c: inter[c] / union[c] for c in inter if union[c]}
    return per, (sum(per.values()) / len(per) if per else None)


def shape_miou(preds: dict, gts: dict, n_labels: int):
    vals = []
    for sid in gts:
        keep = [i for i, g in enumerate(gts[sid]) if g > 0]
        ious = []
        for c in range(1, n_labels + 1):
            p = {i for i in keep if preds[sid][i] == c}
            g = {i for i in keep if gts[sid][i] == c}
            if p or g:
                ious.append(len(p & g) / len(p | g))
        if ious:
            vals.append(sum(ious) / len(ious))
    return sum(vals) / len(vals) if vals else None


# ---------------------------------------------------------------- AP

def exhaustive_ap(preds, gts, threshold=0.5):
    """AP per label from a fully built PR curve.

    ``preds``: list of (shape_id, set, label, confidence);
    ``gts``: list of (shape_id, set, label).
    """
    labels = sorted({g[2] for g in gts} | {p[2] for p in preds})
    out = {}
    for lab in labels:
        ps = [(i, p) for i, p in enumerate(preds) if p[2] == lab]
        gs = [g for g in gts if g[2] == lab]
        ps.sort(key=lambda ip: (-ip[1][3], ip[1][0], ip[0]))
        used = set()
        flags = []
        for _, (sid, pts, _, _) in ps:
            best, best_iou = None, -1.0
            for gi, g in enumerate(gs):
                if gi in used or g[0] != sid:
                    continue
                iou = set_iou(pts, g[1])
                if iou > best_iou:
                    best, best_iou = gi, iou
            hit = best is not None and best_iou > threshold
            if hit:
                used.add(best)
            flags.append(hit)
        if not gs or not flags:
            out[lab] = 0.0
            continue
        # operating point after each rank, exact arithmetic
        curve = []
        tp = 0
        for r, f in enumerate(flags, 1):
            tp += f
            curve.append((Fraction(tp, len(gs)), Fraction(tp, r)))
        ap = Fraction(0)
        prev_recall = Fraction(0)
        for r, (rec, _) in enumerate(curve):
            envelope = max(p for _, p in curve[r:])
            ap += (rec - prev_recall) * envelope
            prev_recall = rec
        out[lab] = float(ap)
    return out


# ---------------------------------------------------------------- gradients

def _pattern(params, points):
    _, cache = nnet.forward(params, points, return_cache=True)
    parts = [a > 0 for _, a in cache["enc"]] + [a > 0 for _, a in cache["dec"]]
    return [p.tobytes() for p in parts] + [np.asarray(cache["arg"]).tobytes()]


def fd_gradient(f, params, points, name, idx, h=1e-5):
    """Finite-difference derivative of ``f`` w.r.t. ``params[name].flat[idx]``.

    Central difference when the ReLU/max-pool pattern is the same on both
    sides. If a ±h step crosses a kink, the derivative of the smooth piece
    containing the base point is taken with a second-order one-sided
    difference from the side whose pattern is unchanged.
    """
    flat = params[name].reshape(-1)
    old = flat[idx]

    def at(delta):
        flat[idx] = old + delta
        try:
            return f(), _pattern(params, points)
        finally:
            flat[idx] = old

    base_pat = _pattern(params, points)
    f0 = f()
    fp, pp = at(h)
    fm, pm = at(-h)
    if pp == base_pat and pm == base_pat:
        return (fp - fm) / (2 * h)
    for sign, pat in ((1.0, pp), (-1.0, pm)):
        if pat != base_pat:
            continue
        f2, p2 = at(2 * sign * h)
        if p2 == base_pat:
            f1 = fp if sign > 0 else fm
            return sign * (-3 * f0 + 4 * f1 - f2) / (2 * h)
    return (fp - fm) / (2 * h)


def random_problem(seed, n=16, k=4, s=3, encoder=(8, 12), decoder=(12,)):
    """Random network, cloud and targets for gradient checks."""
    rng = np.random.default_rng(seed)
    params = nnet.init_params(nnet.NetConfig(s, k, encoder, decoder, seed))
    for key in params:
        params[key] = params[key] + rng.normal(0, 0.05, params[key].shape)
    pts = rng.uniform(-1, 1, (n, 3))
    t = int(rng.integers(1, k + 1))
    inst = rng.integers(0, t + 1, n)  # 0 = other
    masks = np.array([(inst == i + 1).astype(float) for i in range(t)])
    sem = np.zeros((n, s))
    lab = inst > 0
    sem[np.nonzero(lab)[0], rng.integers(0, s, lab.sum())] = 1.0
    return params, pts, nnet.Targets(sem, masks, (~lab).astype(float))


def gradient_mismatches(seed, h=1e-5, **kw):
    """List of (param, index, analytic, numeric) entries failing the tolerance."""
    params, pts, tg = random_problem(seed, **kw)
    w = nnet.LossWeights()
    br, grads = nnet.loss_and_grad(params, pts, tg, w)
    matching = br.matching
    targets = nnet.matched_ious(params, pts, tg, matching)

    def f():
        return nnet.loss_value(params, pts, tg, w, matching, targets).total

    bad, checked = [], 0
    for name in params:
        for idx in range(params[name].size):
            a = float(grads[name].reshape(-1)[idx])
            num = fd_gradient(f, params, pts, name, idx, h)
            checked += 1
            if abs(a) < 1e-6:
                ok = abs(a - num) < 1e-7
            else:
                ok = abs(a - num) / max(abs(a), abs(num)) < 1e-4
            if not ok:
                bad.append((name, idx, a, num))
    return bad, checked
