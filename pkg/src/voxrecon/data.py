"""Synthetic training data: analytic surfaces, blue-noise thinning, augmentation and PLY I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

SHAPE_KINDS = ("sphere", "box", "cylinder", "torus", "corner")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    params: tuple
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")


def random_shape(kind, seed):
    """Shape parameters drawn from ``seed``; every surface fits inside [-0.5, 0.5]^3."""
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        params = (rng.uniform(0.25, 0.45),)
    elif kind == "box":
        params = tuple(rng.uniform(0.3, 0.9, size=3))
    elif kind == "cylinder":
        params = (rng.uniform(0.15, 0.4), rng.uniform(0.3, 0.9))
    elif kind == "torus":
        tube = rng.uniform(0.07, 0.14)
        params = (rng.uniform(0.2, 0.45 - tube), tube)
    else:
        params = (rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.9), rng.uniform(0.3, 0.9))
    return ShapeSpec(kind, tuple(float(p) for p in params), seed)


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n, radius):
    v = rng.normal(size=(n, 3))
    while True:
        bad = np.linalg.norm(v, axis=1) < 1e-12
        if not bad.any():
            break
        v[bad] = rng.normal(size=(bad.sum(), 3))
    return radius * _unit(v)


def _box(rng, n, ext):
    ext = np.asarray(ext)
    half = ext / 2
    # face pairs normal to x, y, z
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-half, half, size=(n, 3))
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), axis] = side * half[axis]
    return pts


def _cylinder(rng, n, radius, height):
    lateral = 2 * math.pi * radius * height
    cap = math.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    pts = np.empty((n, 3))
    theta = rng.uniform(0, 2 * math.pi, size=n)
    lat = part == 0
    pts[lat, 0] = radius * np.cos(theta[lat])
    pts[lat, 1] = radius * np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-height / 2, height / 2, size=lat.sum())
    caps = ~lat
    rr = radius * np.sqrt(rng.random(caps.sum()))
    pts[caps, 0] = rr * np.cos(theta[caps])
    pts[caps, 1] = rr * np.sin(theta[caps])
    pts[caps, 2] = np.where(part[caps] == 1, height / 2, -height / 2)
    return pts


def _torus(rng, n, major, minor):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * math.pi, size=m)
        v = rng.uniform(0, 2 * math.pi, size=m)
        # area element is proportional to major + minor*cos(v)
        keep = rng.random(m) * (major + minor) <= major + minor * np.cos(v)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)])
    return out[:n]


def _corner(rng, n, width, depth, height):
    """Floor ``z = -height/2`` and back wall ``y = -depth/2`` sharing an edge."""
    a_floor, a_wall = width * depth, width * height
    wall = rng.random(n) < a_wall / (a_floor + a_wall)
    pts = np.empty((n, 3))
    pts[:, 0] = rng.uniform(-width / 2, width / 2, size=n)
    pts[~wall, 1] = rng.uniform(-depth / 2, depth / 2, size=(~wall).sum())
    pts[~wall, 2] = -height / 2
    pts[wall, 1] = -depth / 2
    pts[wall, 2] = rng.uniform(-height / 2, height / 2, size=wall.sum())
    return pts


def sample_surface(spec, n, rng=None):
    """``n`` points on the analytic surface, uniform with respect to area."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    p = spec.params
    if any(v <= 0 for v in p):
        raise ValueError(f"shape parameters must be positive: {p}")
    if spec.kind == "sphere":
        return _sphere(rng, n, *p)
    if spec.kind == "box":
        return _box(rng, n, p)
    if spec.kind == "cylinder":
        return _cylinder(rng, n, *p)
    if spec.kind == "torus":
        if p[1] >= p[0]:
            raise ValueError("torus tube radius must be below the ring radius")
        return _torus(rng, n, *p)
    return _corner(rng, n, *p)


def surface_area(spec):
    p = spec.params
    if spec.kind == "sphere":
        return 4 * math.pi * p[0] ** 2
    if spec.kind == "box":
        return 2 * (p[0] * p[1] + p[1] * p[2] + p[0] * p[2])
    if spec.kind == "cylinder":
        return 2 * math.pi * p[0] * p[1] + 2 * math.pi * p[0] ** 2
    if spec.kind == "torus":
        return 4 * math.pi ** 2 * p[0] * p[1]
    return p[0] * p[1] + p[0] * p[2]


def surface_distance(spec, pts):
    """Unsigned distance from points to the analytic surface."""
    x = np.asarray(pts, dtype=np.float64)
    p = spec.params
    if spec.kind == "sphere":
        return np.abs(np.linalg.norm(x, axis=1) - p[0])
    if spec.kind == "box":
        h = np.asarray(p) / 2
        q = np.abs(x) - h
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(q.max(axis=1), 0)
        return np.abs(outside + inside)
    if spec.kind == "cylinder":
        r, hh = p[0], p[1] / 2
        dr = np.hypot(x[:, 0], x[:, 1]) - r
        dz = np.abs(x[:, 2]) - hh
        outside = np.hypot(np.maximum(dr, 0), np.maximum(dz, 0))
        return np.abs(outside + np.minimum(np.maximum(dr, dz), 0))
    if spec.kind == "torus":
        ring = np.hypot(x[:, 0], x[:, 1]) - p[0]
        return np.abs(np.hypot(ring, x[:, 2]) - p[1])
    w, dpt, ht = p
    # floor rectangle and wall rectangle
    fl = np.stack([np.maximum(np.abs(x[:, 0]) - w / 2, 0), np.maximum(np.abs(x[:, 1]) - dpt / 2, 0),
                   x[:, 2] + ht / 2], axis=1)
    wl = np.stack([np.maximum(np.abs(x[:, 0]) - w / 2, 0), x[:, 1] + dpt / 2,
                   np.maximum(np.abs(x[:, 2]) - ht / 2, 0)], axis=1)
    return np.minimum(np.linalg.norm(fl, axis=1), np.linalg.norm(wl, axis=1))


def poisson_disk(points, radius, rng=None):
    """Greedy dart-throwing thinning: visit points in random order, keep one unless a kept point is within ``radius``.

    The result is pairwise at least ``radius`` apart and maximal. Points are
    returned in their original order.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return pts.copy()
    order = np.arange(len(pts)) if rng is None else rng.permutation(len(pts))
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    d = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    pairs = pairs[d < radius]
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    srt = np.argsort(src, kind="stable")
    dst = dst[srt]
    ptr = np.searchsorted(src[srt], np.arange(len(pts) + 1))
    blocked = np.zeros(len(pts), dtype=bool)
    kept = np.zeros(len(pts), dtype=bool)
    for i in order:
        if blocked[i]:
            continue
        kept[i] = True
        blocked[dst[ptr[i]:ptr[i + 1]]] = True
    return pts[kept]


# ---------------------------------------------------------------- samples

@dataclass(frozen=True)
class AugmentConfig:
    n_input: int = 2048
    noise_max: float = 0.01
    scale_range: tuple = (0.8, 1.25)
    outlier_frac: float = 0.05
    bbox_inflate: float = 1.2
    # fixed values override the random draws when set
    noise: float | None = None
    scale: float | None = None
    n_outliers: int | None = None


@dataclass
class Sample:
    gt: np.ndarray
    input: np.ndarray
    noise: float
    scale: float
    outliers: np.ndarray
    spec: ShapeSpec | None = None
    subsample: np.ndarray = field(default=None, repr=False)


def augment(gt, cfg=AugmentConfig(), rng=None):
    """Subsample, jitter, rescale and inject outliers.

    Both the input and the returned ground truth carry the same global scale.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(gt) < cfg.n_input:
        raise ValueError(f"need at least {cfg.n_input} ground-truth points, got {len(gt)}")
    rng = np.random.default_rng() if rng is None else rng
    idx = rng.choice(len(gt), size=cfg.n_input, replace=False)
    sigma = rng.uniform(0.0, cfg.noise_max) if cfg.noise is None else float(cfg.noise)
    s = rng.uniform(*cfg.scale_range) if cfg.scale is None else float(cfg.scale)
    max_out = int(math.floor(cfg.outlier_frac * cfg.n_input))
    n_out = int(rng.integers(0, max_out + 1)) if cfg.n_outliers is None else int(cfg.n_outliers)
    if n_out > max_out:
        raise ValueError(f"at most {max_out} outliers allowed")
    pts = gt[idx] + rng.normal(scale=sigma, size=(cfg.n_input, 3)) if sigma > 0 else gt[idx].copy()
    pts = pts * s
    gt_s = gt * s
    out_idx = np.sort(rng.choice(cfg.n_input, size=n_out, replace=False))
    lo, hi = gt_s.min(axis=0), gt_s.max(axis=0)
    mid, half = (lo + hi) / 2, (hi - lo) / 2 * cfg.bbox_inflate
    pts[out_idx] = rng.uniform(mid - half, mid + half, size=(n_out, 3))
    return Sample(gt_s, pts, sigma, s, out_idx, subsample=idx)


def make_sample(spec, n_gt=10000, cfg=AugmentConfig(), oversample=4.0):
    """Ground truth by Poisson-disk thinning of a dense surface sample, then augmentation.

    Reproducible from ``(spec, cfg)`` alone.
    """
    rng = np.random.default_rng([spec.seed, 7])
    dense = sample_surface(spec, int(oversample * n_gt), rng)
    # calibrated so that greedy thinning of a 4x dense sample keeps about n_gt points
    radius = math.sqrt(surface_area(spec) / (2.2 * n_gt))
    gt = poisson_disk(dense, radius, rng)
    if len(gt) < cfg.n_input:
        gt = dense
    sample = augment(gt, cfg, rng)
    sample.spec = spec
    return sample


def dataset_manifest(n_shapes, seed, val_frac=0.2):
    """``(kind, seed, split)`` rows, kinds cycling; the validation subset is seed-stable."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31 - 1, size=n_shapes)
    perm = rng.permutation(n_shapes)
    n_val = int(round(val_frac * n_shapes))
    val = set(perm[:n_val].tolist())
    return [
        (SHAPE_KINDS[i % len(SHAPE_KINDS)], int(seeds[i]), "val" if i in val else "train")
        for i in range(n_shapes)
    ]


def write_manifest(path, rows):
    Path(path).write_text("".join(f"{k} {s} {sp}\n" for k, s, sp in rows), encoding="utf-8")


def read_manifest(path):
    rows = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in SHAPE_KINDS or parts[2] not in ("train", "val"):
            raise ValueError(f"{path}:{ln}: malformed manifest line {line!r}")
        rows.append((parts[0], int(parts[1]), parts[2]))
    return rows


# ---------------------------------------------------------------- PLY

class PlyError(ValueError):
    pass


def write_ply(path, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        raise PlyError("refusing to write an empty point cloud")
    if not np.all(np.isfinite(pts)):
        raise PlyError("non-finite coordinates")
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    body = "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts.tolist())
    Path(path).write_text(header + body, encoding="utf-8")


def read_ply(path):
    """Positions from an ASCII PLY; other vertex properties and elements are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError(f"{path}: missing 'ply' magic")
    elements, props, i = [], None, 1
    fmt = None
    while True:
        if i >= len(lines):
            raise PlyError(f"{path}: header has no end_header")
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] == "comment" or tok[0] == "obj_info":
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyError(f"{path}: bad element line")
            props = []
            elements.append((tok[1], int(tok[2]), props))
        elif tok[0] == "property":
            if props is None:
                raise PlyError(f"{path}: property before element")
            props.append(tok[-1])
        elif tok[0] == "end_header":
            break
        else:
            raise PlyError(f"{path}: unexpected header line {lines[i - 1]!r}")
    if fmt != "ascii":
        raise PlyError(f"{path}: only ASCII PLY is supported")
    pts = None
    for name, count, plist in elements:
        rows = lines[i:i + count]
        if len(rows) < count:
            raise PlyError(f"{path}: element {name} declares {count} rows, found {len(rows)}")
        i += count
        if name != "vertex":
            continue
        try:
            cols = [plist.index(a) for a in ("x", "y", "z")]
        except ValueError:
            raise PlyError(f"{path}: vertex element lacks x/y/z") from None
        try:
            data = np.array([[float(r.split()[c]) for c in cols] for r in rows], dtype=np.float64)
        except (ValueError, IndexError):
            raise PlyError(f"{path}: malformed vertex row") from None
        pts = data.reshape(-1, 3)
    if pts is None:
        raise PlyError(f"{path}: no vertex element")
    if not np.all(np.isfinite(pts)):
        raise PlyError(f"{path}: non-finite coordinates")
    return pts
