"""Point clouds, furthest point sampling and the procedural shape generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotation import Annotation, InstanceNode
from .errors import FormatError, InvalidArgumentError, InvalidDataError

PNPC_MAGIC = b"PNPC"


@dataclass
class PointCloud:
    shape_id: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidDataError(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) < 1:
            raise InvalidDataError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidDataError(f"cloud {self.shape_id!r} has non-finite coordinates")
        self.points = pts

    def __len__(self):
        return len(self.points)


def furthest_point_sample(cloud: PointCloud, k: int) -> np.ndarray:
    """Greedy FPS seeded at index 0; ties go to the lowest index."""
    pts = cloud.points
    n = len(pts)
    if not isinstance(k, (int, np.integer)) or k < 1 or k > n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k!r}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = 0
    # squared distances order identically to distances
    mind = np.sum((pts - pts[0]) ** 2, axis=1)
    mind[0] = -1.0
    for i in range(1, k):
        j = int(np.argmax(mind))
        chosen[i] = j
        d = np.sum((pts - pts[j]) ** 2, axis=1)
        np.minimum(mind, d, out=mind)
        mind[j] = -1.0
    return chosen


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise InvalidDataError(f"cloud {cloud.shape_id!r} has non-finite coordinates")
    if np.all(pts == pts[0]):
        # coincident points; the centroid's rounding error must not be rescaled
        return PointCloud(cloud.shape_id, np.zeros_like(pts))
    centered = pts - pts.mean(axis=0)
    r = np.sqrt(np.max(np.sum(centered**2, axis=1)))
    if r > 0:
        centered = centered / r
    return PointCloud(cloud.shape_id, centered)


# ---------------------------------------------------------------- file IO

def write_pnpc(cloud: PointCloud, path) -> None:
    data = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as f:
        f.write(PNPC_MAGIC)
        f.write(struct.pack("<I", len(data)))
        f.write(data.tobytes())


def read_pnpc(path, shape_id=None) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != PNPC_MAGIC:
        raise FormatError("bad magic, expected PNPC", path, offset=0)
    if len(raw) < 8:
        raise FormatError("truncated header", path, offset=len(raw))
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 12 * n:
        raise FormatError(f"expected {8 + 12 * n} bytes for {n} points, got {len(raw)}", path,
                          offset=min(len(raw), 8 + 12 * n))
    pts = np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, 3).astype(np.float64)
    return PointCloud(shape_id or path.stem, pts)


def write_xyz(cloud: PointCloud, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in cloud.points:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_xyz(path, shape_id=None) -> PointCloud:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"expected 3 values, got {len(parts)}", path, line=lineno)
            try:
                rows.append([float(v) for v in parts])
            except ValueError as e:
                raise FormatError(str(e), path, line=lineno) from None
    if not rows:
        raise FormatError("no points", path)
    return PointCloud(shape_id or path.stem, np.array(rows))


def read_cloud(path, shape_id=None) -> PointCloud:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head == PNPC_MAGIC:
        return read_pnpc(path, shape_id)
    return read_xyz(path, shape_id)


# ---------------------------------------------------------------- primitives

class Box:
    def __init__(self, center, half):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half, dtype=np.float64)

    def area(self):
        hx, hy, hz = self.half
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def sample(self, rng, n):
        hx, hy, hz = self.half
        face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = faces // 2
        sign = np.where(faces % 2 == 0, -1.0, 1.0)
        uv[np.arange(n), axis] = sign
        return self.center + uv * self.half


class Cylinder:
    """Vertical (z-axis) closed cylinder from ``z0`` to ``z0 + height``."""

    def __init__(self, x, y, z0, radius, height):
        self.base = np.array([x, y, z0], dtype=np.float64)
        self.radius = float(radius)
        self.height = float(height)

    def area(self):
        return 2 * np.pi * self.radius * (self.radius + self.height)

    def sample(self, rng, n):
        side = 2 * np.pi * self.radius * self.height
        cap = np.pi * self.radius**2
        kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, size=n)
        r = np.where(kind == 0, self.radius, self.radius * np.sqrt(rng.uniform(0, 1, size=n)))
        z = np.where(kind == 0, rng.uniform(0, self.height, size=n),
                     np.where(kind == 1, 0.0, self.height))
        return self.base + np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


# ---------------------------------------------------------------- generator

@dataclass(frozen=True)
class SyntheticShapeSpec:
    category: str
    seed: int = 0
    points_per_shape: int = 1024
    jitter_sigma: float = 0.002


class _Builder:
    """Accumulates an instance tree whose childless nodes carry primitives."""

    def __init__(self, root_id):
        self.root = InstanceNode(root_id)
        self.parts: list[tuple[InstanceNode, object]] = []

    def node(self, parent: InstanceNode, template_id: int) -> InstanceNode:
        child = InstanceNode(template_id)
        parent.children.append(child)
        return child

    def part(self, parent: InstanceNode, template_id: int, prim) -> InstanceNode:
        child = self.node(parent, template_id)
        self.parts.append((child, prim))
        return child

    def truncated(self, node: InstanceNode, prim) -> InstanceNode:
        """Attach geometry to an internal template node (no finer labels)."""
        self.parts.append((node, prim))
        return node


def _chair(rng) -> _Builder:
    b = _Builder(0)
    W = rng.uniform(0.40, 0.60)
    D = rng.uniform(0.38, 0.55)
    H = rng.uniform(0.40, 0.55)
    t = 0.035
    top = H + t
    bh = rng.uniform(0.45, 0.75)

    back = b.node(b.root, 1)
    if rng.uniform() < 0.5:
        b.part(back, 2, Box((0, -D + 0.03, top + bh / 2), (W, 0.03, bh / 2)))
    else:
        frame = b.node(back, 3)
        n_bars = int(rng.integers(2, 6))
        bar_top = top + bh - 0.06
        for x in np.linspace(-W + 0.03, W - 0.03, n_bars):
            b.part(frame, 4, Box((x, -D + 0.03, (top + bar_top) / 2), (0.022, 0.022, (bar_top - top) / 2)))
        b.part(frame, 16, Box((0, -D + 0.03, top + bh - 0.03), (W, 0.03, 0.03)))

    seat = b.node(b.root, 5)
    b.part(seat, 6, Box((0, 0, H), (W, D, t)))

    base = b.node(b.root, 7)
    bottom = H - t
    if rng.uniform() < 0.6:
        reg = b.node(base, 8)
        lx, ly = W - 0.04, D - 0.04
        for sx in (-1, 1):
            for sy in (-1, 1):
                b.part(reg, 9, Box((sx * lx, sy * ly, bottom / 2), (0.03, 0.03, bottom / 2)))
        if rng.uniform() < 0.5:
            zb = rng.uniform(0.2, 0.4) * bottom
            for sy in (-1, 1):
                b.part(reg, 17, Box((0, sy * ly, zb), (lx - 0.03, 0.015, 0.015)))
    else:
        ped = b.node(base, 10)
        foot_h = 0.05
        b.part(ped, 11, Cylinder(0, 0, foot_h, rng.uniform(0.035, 0.06), bottom - foot_h))
        reach = rng.uniform(0.30, 0.42)
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            half = (reach / 2 if dx else 0.03, reach / 2 if dy else 0.03, foot_h / 2)
            b.part(ped, 12, Box((dx * reach / 2, dy * reach / 2, foot_h / 2), half))

    if rng.uniform() < 0.5:
        ah = rng.uniform(0.15, 0.25)
        two_supports = rng.uniform() < 0.3
        for sx in (-1, 1):
            arm = b.node(b.root, 13)
            x = sx * (W + 0.03)
            b.part(arm, 14, Box((x, 0, top + ah), (0.03, 0.85 * D, 0.025)))
            ys = (0.7 * D, -0.6 * D) if two_supports else (0.7 * D,)
            for y in ys:
                b.part(arm, 15, Box((x, y, top + ah / 2), (0.022, 0.022, ah / 2)))
    return b


def _lamp(rng) -> _Builder:
    b = _Builder(0)
    if rng.uniform() < 0.5:
        lamp = b.node(b.root, 1)
        ids = dict(base=2, base_part=3, body=4, pole=5, unit=6, shade=7, bulb=15)
        base_r = rng.uniform(0.15, 0.25)
        base_h = 0.05
        pole_h = rng.uniform(0.45, 0.8)
    else:
        lamp = b.node(b.root, 8)
        ids = dict(base=9, base_part=10, foot=11, body=12, unit=13, shade=14, bulb=16)
        base_r = rng.uniform(0.12, 0.18)
        base_h = 0.04
        pole_h = rng.uniform(1.2, 1.6)

    base = b.node(lamp, ids["base"])
    b.part(base, ids["base_part"], Cylinder(0, 0, 0, base_r, base_h))
    if "foot" in ids:
        reach = rng.uniform(0.30, 0.45)
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            half = (reach / 2 if dx else 0.025, reach / 2 if dy else 0.025, 0.02)
            b.part(base, ids["foot"], Box((dx * reach / 2, dy * reach / 2, 0.02), half))

    pole = Cylinder(0, 0, base_h, rng.uniform(0.015, 0.03), pole_h)
    if "pole" in ids:
        b.part(b.node(lamp, ids["body"]), ids["pole"], pole)
    else:
        b.part(lamp, ids["body"], pole)

    z = base_h + pole_h
    unit = b.node(lamp, ids["unit"])
    shade_r = rng.uniform(0.15, 0.28)
    shade_h = rng.uniform(0.15, 0.28)
    if rng.uniform() < 0.3:
        # a globe with no finer labels: only the coarse level names it
        g = rng.uniform(0.10, 0.16)
        b.truncated(unit, Box((0, 0, z + g), (g, g, g)))
    else:
        b.part(unit, ids["bulb"], Cylinder(0, 0, z, 0.04, 0.07))
        b.part(unit, ids["shade"], Cylinder(0, 0, z + 0.05, shade_r, shade_h))
    return b


GENERATORS = {"chair": _chair, "lamp": _lamp}


def _allocate(n, areas):
    """At least one point per part, the rest by largest remainder on area."""
    p = len(areas)
    w = np.asarray(areas, dtype=np.float64)
    quota = (n - p) * w / w.sum()
    sizes = np.floor(quota).astype(np.int64)
    rest = (n - p) - int(sizes.sum())
    order = sorted(range(p), key=lambda i: (-(quota[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes + 1


def generate_synthetic(spec: SyntheticShapeSpec, shape_id=None) -> tuple[PointCloud, Annotation]:
    """Sample a procedural shape and its ground-truth instance tree."""
    if spec.category not in GENERATORS:
        raise InvalidArgumentError(
            f"unknown synthetic category {spec.category!r} (have {sorted(GENERATORS)})"
        )
    if spec.points_per_shape < 1:
        raise InvalidArgumentError("points_per_shape must be positive")
    if spec.jitter_sigma < 0:
        raise InvalidArgumentError("jitter_sigma must be non-negative")
    rng = np.random.default_rng(spec.seed)
    b = GENERATORS[spec.category](rng)
    n = spec.points_per_shape
    if n < len(b.parts):
        raise InvalidArgumentError(
            f"points_per_shape={n} is smaller than the {len(b.parts)} generated parts"
        )
    sizes = _allocate(n, [prim.area() for _, prim in b.parts])
    chunks = [prim.sample(rng, int(k)) for (_, prim), k in zip(b.parts, sizes)]
    pts = np.concatenate(chunks, axis=0)
    # sampled point j lands at output index perm[j]
    perm = rng.permutation(n)
    out = np.empty_like(pts)
    out[perm] = pts
    if spec.jitter_sigma > 0:
        out = out + rng.normal(0.0, spec.jitter_sigma, size=out.shape)
    start = 0
    for (node, _), k in zip(b.parts, sizes):
        node.point_indices = sorted(int(i) for i in perm[start:start + k])
        start += k
    sid = shape_id or f"{spec.category}_{spec.seed}"
    return PointCloud(sid, out), Annotation(sid, spec.category, b.root, n)
