"""Synthetic shapes, occlusion-made partials, and unpaired dataset manifests.

Shapes are unions of analytic surface patches sampled uniformly by area,
then centred on their vertical (y) axis and scaled so the farthest surface
point sits at distance 1.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloudio import write_cloud
from .config import CATEGORIES, TrainConfig
from .errors import FormatError, InvalidArgument

MANIFEST_VERSION = 1
ROLES = ("partial", "complete", "ground_truth")

# (low, high) ranges for every size parameter, per category
PARAM_RANGES = {
    "box": {"sx": (0.3, 1.0), "sy": (0.3, 1.0), "sz": (0.3, 1.0)},
    "cylinder": {"radius": (0.3, 0.8), "height": (0.5, 1.6)},
    "sphere": {"radius": (0.5, 1.0)},
    "lamp_like": {
        "base_radius": (0.3, 0.5), "base_height": (0.05, 0.1),
        "pole_radius": (0.03, 0.06), "pole_height": (0.8, 1.4),
        "shade_bottom": (0.3, 0.6), "shade_top": (0.1, 0.3), "shade_height": (0.3, 0.5),
    },
    "chair_like": {
        "seat_width": (0.8, 1.2), "seat_depth": (0.8, 1.2), "seat_thickness": (0.06, 0.12),
        "leg_height": (0.6, 1.0), "leg_width": (0.06, 0.12), "back_height": (0.6, 1.2),
        "back_thickness": (0.05, 0.1),
    },
}


@dataclass
class ShapeSpec:
    category: str
    params: dict
    yaw: float = 0.0
    sample_count: int = 2048

    def __post_init__(self):
        if self.category not in PARAM_RANGES:
            raise InvalidArgument(f"unknown category {self.category!r}")
        ranges = PARAM_RANGES[self.category]
        if set(self.params) != set(ranges):
            raise InvalidArgument(f"{self.category} needs parameters {sorted(ranges)}")
        for name, (lo, hi) in ranges.items():
            v = self.params[name]
            if not (lo <= v <= hi):
                raise InvalidArgument(f"{self.category}.{name}={v} outside [{lo}, {hi}]")
        if self.sample_count < 1:
            raise InvalidArgument("sample_count must be positive")


def random_spec(category: str, rng: np.random.Generator, sample_count: int = 2048) -> ShapeSpec:
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES[category].items()}
    return ShapeSpec(category, params, yaw=float(rng.uniform(0, 2 * np.pi)), sample_count=sample_count)


# --- surface patches -------------------------------------------------------
# each patch: area, sample(rng, n) -> (n, 3), and the farthest distance of the
# patch from a point (0, cy, 0) on the vertical axis


class _Rect:
    def __init__(self, center, u, v):
        self.c, self.u, self.v = (np.asarray(a, dtype=np.float64) for a in (center, u, v))
        self.area = 4.0 * np.linalg.norm(self.u) * np.linalg.norm(self.v)

    def sample(self, rng, n):
        s = rng.uniform(-1, 1, size=(n, 2))
        return self.c + s[:, :1] * self.u + s[:, 1:] * self.v

    def max_dist(self, cy):
        o = np.array([0.0, cy, 0.0])
        return max(np.linalg.norm(self.c + a * self.u + b * self.v - o) for a in (-1, 1) for b in (-1, 1))


def _box(center, hx, hy, hz):
    c = np.asarray(center, dtype=np.float64)
    ex, ey, ez = np.eye(3)
    faces = []
    for axis, h, (p, q) in ((ex, hx, (ey * hy, ez * hz)), (ey, hy, (ex * hx, ez * hz)), (ez, hz, (ex * hx, ey * hy))):
        for sign in (-1, 1):
            faces.append(_Rect(c + sign * h * axis, p, q))
    return faces


class _Frustum:
    """Lateral surface of a (possibly straight) truncated cone around the y axis."""

    def __init__(self, y0, y1, r0, r1):
        self.y0, self.y1, self.r0, self.r1 = y0, y1, r0, r1
        slant = np.hypot(y1 - y0, r1 - r0)
        self.area = np.pi * (r0 + r1) * slant

    def sample(self, rng, n):
        u = rng.uniform(size=n)
        r0, r1 = self.r0, self.r1
        if np.isclose(r0, r1):
            t = u
        else:
            # inverse CDF of a density proportional to the radius at height fraction t
            a = 0.5 * (r1 - r0)
            t = (-r0 + np.sqrt(r0 * r0 + 4 * a * u * 0.5 * (r0 + r1))) / (2 * a)
        r = r0 + (r1 - r0) * t
        th = rng.uniform(0, 2 * np.pi, size=n)
        y = self.y0 + (self.y1 - self.y0) * t
        return np.stack([r * np.cos(th), y, r * np.sin(th)], axis=1)

    def max_dist(self, cy):
        return max(np.hypot(self.r0, self.y0 - cy), np.hypot(self.r1, self.y1 - cy))


class _Disk:
    def __init__(self, y, r):
        self.y, self.r = y, r
        self.area = np.pi * r * r

    def sample(self, rng, n):
        rad = self.r * np.sqrt(rng.uniform(size=n))
        th = rng.uniform(0, 2 * np.pi, size=n)
        return np.stack([rad * np.cos(th), np.full(n, self.y), rad * np.sin(th)], axis=1)

    def max_dist(self, cy):
        return np.hypot(self.r, self.y - cy)


class _Sphere:
    def __init__(self, r):
        self.r = r
        self.area = 4 * np.pi * r * r

    def sample(self, rng, n):
        g = rng.standard_normal(size=(n, 3))
        return self.r * g / np.linalg.norm(g, axis=1, keepdims=True)

    def max_dist(self, cy):
        return self.r + abs(cy)


def _cylinder(y0, y1, r):
    return [_Frustum(y0, y1, r, r), _Disk(y0, r), _Disk(y1, r)]


def _parts(spec: ShapeSpec):
    """Surface patches of ``spec`` and the height of the shape's centre."""
    p = spec.params
    cat = spec.category
    if cat == "box":
        return _box((0, 0, 0), p["sx"], p["sy"], p["sz"]), 0.0
    if cat == "cylinder":
        h = p["height"] / 2
        return _cylinder(-h, h, p["radius"]), 0.0
    if cat == "sphere":
        return [_Sphere(p["radius"])], 0.0
    if cat == "lamp_like":
        bh, ph, sh = p["base_height"], p["pole_height"], p["shade_height"]
        top = bh + ph
        parts = _cylinder(0.0, bh, p["base_radius"]) + _cylinder(bh, top, p["pole_radius"])
        parts.append(_Frustum(top - 0.5 * sh, top + 0.5 * sh, p["shade_bottom"], p["shade_top"]))
        return parts, 0.5 * (top + 0.5 * sh)
    if cat == "chair_like":
        w, dp, st = p["seat_width"] / 2, p["seat_depth"] / 2, p["seat_thickness"] / 2
        lh, lw, bh, bt = p["leg_height"], p["leg_width"] / 2, p["back_height"], p["back_thickness"] / 2
        parts = _box((0, lh + st, 0), w, st, dp)
        seat_top = lh + 2 * st
        parts += _box((0, seat_top + bh / 2, -dp + bt), w, bh / 2, bt)
        for sx in (-1, 1):
            for sz in (-1, 1):
                parts += _box((sx * (w - lw), lh / 2, sz * (dp - lw)), lw, lh / 2, lw)
        return parts, 0.5 * (seat_top + bh)
    raise InvalidArgument(f"unknown category {cat!r}")


def _yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def sample_shape(spec: ShapeSpec, seed) -> np.ndarray:
    """Uniform-by-area surface samples of ``spec``, normalized into the unit ball."""
    rng = np.random.default_rng(seed)
    parts, cy = _parts(spec)
    areas = np.array([pt.area for pt in parts])
    counts = rng.multinomial(spec.sample_count, areas / areas.sum())
    pts = np.concatenate([pt.sample(rng, int(n)) for pt, n in zip(parts, counts)])
    pts = pts[rng.permutation(len(pts))]
    radius = max(pt.max_dist(cy) for pt in parts)
    pts = (pts - np.array([0.0, cy, 0.0])) / radius
    return pts @ _yaw_matrix(spec.yaw).T


def _random_direction(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def make_partial(complete, mode: str = "halfspace", severity: float = 0.3, seed=0) -> np.ndarray:
    """Occlude ``complete`` by dropping round(severity * N) points.

    ``halfspace`` cuts with a randomly oriented plane placed at the matching
    offset; ``viewpoint`` drops the points whose centred direction points most
    directly away from a random view direction. Survivors keep their order.
    """
    pts = np.asarray(complete, dtype=np.float64)
    if not 0.0 <= severity <= 0.9:
        raise InvalidArgument(f"severity must lie in [0, 0.9], got {severity}")
    if mode not in ("halfspace", "viewpoint"):
        raise InvalidArgument(f"unknown occlusion mode {mode!r}")
    rng = np.random.default_rng(seed)
    direction = _random_direction(rng)
    n_drop = int(round(severity * len(pts)))
    if mode == "halfspace":
        score = pts @ direction
    else:
        centred = pts - pts.mean(axis=0)
        norms = np.linalg.norm(centred, axis=1)
        score = -(centred @ direction) / np.where(norms > 0, norms, 1.0)
    drop = np.argsort(-score, kind="stable")[:n_drop]
    keep = np.ones(len(pts), dtype=bool)
    keep[drop] = False
    return pts[keep]


# --- manifests -------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    role: str
    category: str
    path: str  # relative to the manifest's directory


@dataclass
class DatasetManifest:
    split: str
    seed: int
    entries: list = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: Path | None = None

    def paths(self, role, category=None):
        return [self.resolve(e) for e in self.entries
                if e.role == role and (category is None or e.category == category)]

    def categories(self):
        return sorted({e.category for e in self.entries})

    def resolve(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.path

    def eval_pairs(self, category=None):
        """(category, partial path, ground truth path or None), matched by file stem."""
        truth = {(e.category, Path(e.path).stem): self.resolve(e)
                 for e in self.entries if e.role == "ground_truth"}
        for e in self.entries:
            if e.role == "partial" and (category is None or e.category == category):
                yield e.category, self.resolve(e), truth.get((e.category, Path(e.path).stem))


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [f"#olat-manifest\tversion={manifest.version}\tsplit={manifest.split}\tseed={manifest.seed}\n"]
    lines += [f"{e.role}\t{e.category}\t{e.path}\n" for e in manifest.entries]
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.writelines(lines)
    os.replace(tmp, path)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#olat-manifest"):
        raise FormatError(f"{path}: missing manifest header", offset=0)
    header = dict(kv.split("=", 1) for kv in lines[0].split("\t")[1:])
    if int(header.get("version", -1)) != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {header.get('version')}", offset=0)
    man = DatasetManifest(split=header["split"], seed=int(header["seed"]), root=path.parent)
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        if line.strip():
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in ROLES:
                raise FormatError(f"{path}: bad manifest line {line!r}", offset=offset)
            man.entries.append(ManifestEntry(*parts))
        offset += len(line) + 1
    return man


def instance_seed(seed: int, category: str, instance: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, CATEGORIES.index(category), instance])


def generate_instance(cfg: TrainConfig, category: str, instance: int):
    """Complete cloud and its occluded partial for one numbered instance."""
    ss = instance_seed(cfg.seed, category, instance)
    spec_seed, sample_seed, partial_seed, sev_seed = ss.spawn(4)
    spec = random_spec(category, np.random.default_rng(spec_seed), cfg.raw_points)
    complete = sample_shape(spec, sample_seed)
    severity = np.random.default_rng(sev_seed).uniform(cfg.severity_min, cfg.severity_max)
    partial = make_partial(complete, cfg.partial_mode, severity, partial_seed)
    return complete, partial


def build_dataset(cfg: TrainConfig, out_dir=None) -> dict:
    """Write train and eval splits; returns {split: DatasetManifest}.

    Per category, instance numbers 0..n_train_partial-1 feed only the partial
    training set, the next n_train_complete only the complete set, and the
    rest the paired eval split, so no training partial ever has its own
    complete shape in the training data.
    """
    root = Path(out_dir or cfg.data_dir)
    manifests = {s: DatasetManifest(split=s, seed=cfg.seed, root=root) for s in ("train", "eval")}
    for category in cfg.categories:
        plan = ([("train", "partial", i) for i in range(cfg.n_train_partial)]
                + [("train", "complete", cfg.n_train_partial + i) for i in range(cfg.n_train_complete)]
                + [("eval", "partial", cfg.n_train_partial + cfg.n_train_complete + i) for i in range(cfg.n_eval)])
        for split, role, inst in plan:
            complete, partial = generate_instance(cfg, category, inst)
            outputs = {"partial": partial, "complete": complete}
            if split == "eval":
                outputs = {"partial": partial, "ground_truth": complete}
            elif role == "partial":
                outputs = {"partial": partial}
            else:
                outputs = {"complete": complete}
            for out_role, pts in outputs.items():
                rel = f"{split}/{out_role}/{category}_{inst:05d}.pcb"
                try:
                    (root / rel).parent.mkdir(parents=True, exist_ok=True)
                    write_cloud(root / rel, pts)
                except OSError as exc:
                    raise OSError(f"cannot write {root / rel}: {exc}") from exc
                manifests[split].entries.append(ManifestEntry(out_role, category, rel))
    for split, man in manifests.items():
        write_manifest(root / f"{split}.manifest", man)
    return manifests
