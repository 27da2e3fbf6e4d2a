"""Synthetic multi-domain point-cloud benchmark.

Shapes are sampled uniformly over their surfaces, each domain applies its own
corruption (noise, occlusion, stretching, sparsity), and a leave-one-out task
file is written per domain so that every domain serves once as the unseen
target.

On-disk layout produced by :func:`build_benchmark`::

    <root>/manifest.cfg
    <root>/domains/<domain>/<split>/<sample id>.xyz
    <root>/tasks/<target domain>.txt
"""

from __future__ import annotations

import math
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import parse_kv_file, render_kv
from .errors import ConfigError, CountMismatch, DegenerateCloud, ParseError, UnknownClass
from .numerics import derive_seed, make_rng

CLASS_NAMES = ("sphere", "cube", "cylinder", "cone", "torus")
SPLITS = ("train", "test")
TASK_SECTIONS = ("source_train", "source_val", "target_test")


@dataclass
class PointCloud:
    coords: np.ndarray
    label: int = 0
    domain_id: int = 0
    id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)

    def __len__(self) -> int:
        return len(self.coords)

    def with_coords(self, coords: np.ndarray) -> "PointCloud":
        return PointCloud(coords, self.label, self.domain_id, self.id)


# ----------------------------------------------------------------------- shapes


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n):
    return _unit_vectors(rng, n)


def _cube(rng, n):
    half = rng.uniform(0.7, 1.0)
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-half, half, size=(n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half
    return pts


def _cylinder(rng, n):
    r = 1.0
    half_h = rng.uniform(0.5, 2.0) * r  # height / diameter in [0.5, 2]
    side = 2 * math.pi * r * 2 * half_h
    cap = math.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(size=n)))
    z = np.where(part == 0, rng.uniform(-half_h, half_h, size=n), np.where(part == 1, half_h, -half_h))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(rng, n):
    r = 1.0
    height = rng.uniform(1.0, 2.0)
    slant = math.hypot(r, height)
    lateral = math.pi * r * slant
    base = math.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    frac = np.sqrt(rng.uniform(size=n))  # area grows linearly with distance from apex / centre
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rad = r * frac
    z = np.where(on_side, height * (1.0 - frac), 0.0) - height / 3.0
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(rng, n):
    R = 1.0
    r = rng.uniform(0.25, 0.45)
    phis = np.empty(0)
    # area element is proportional to R + r cos(phi)
    while len(phis) < n:
        cand = rng.uniform(0, 2 * math.pi, size=2 * n)
        keep = rng.uniform(0, R + r, size=2 * n) < R + r * np.cos(cand)
        phis = np.concatenate([phis, cand[keep]])
    phi = phis[:n]
    theta = rng.uniform(0, 2 * math.pi, size=n)
    ring = R + r * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta), r * np.sin(phi)], axis=1)


_SHAPES = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "cone": _cone, "torus": _torus}


def class_id(cls, classes=CLASS_NAMES) -> int:
    if isinstance(cls, (int, np.integer)):
        if not 0 <= cls < len(classes):
            raise UnknownClass(f"class id {cls} out of range")
        return int(cls)
    if cls not in classes:
        raise UnknownClass(f"unknown class {cls!r}")
    return classes.index(cls)


def generate_shape(cls, n: int, rng: np.random.Generator, classes=CLASS_NAMES) -> PointCloud:
    label = class_id(cls, classes)
    name = classes[label]
    if name not in _SHAPES:
        raise UnknownClass(f"no generator for class {name!r}")
    if n < 8:
        raise ValueError(f"need at least 8 points, got {n}")
    return PointCloud(_SHAPES[name](rng, n), label=label)


# ---------------------------------------------------------------------- domains

_CORRUPTION_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*$")
_ARITY = {"clean": 0, "jitter": 1, "halfspace_dropout": 1, "anisotropic_scale": 3, "density_resample": 1}


def parse_corruption(text: str) -> list[tuple[str, tuple[float, ...]]]:
    """``"jitter(0.02) + halfspace_dropout(0.3)"`` -> [("jitter", (0.02,)), ...]"""
    out = []
    for part in text.split("+"):
        m = _CORRUPTION_RE.match(part)
        if not m or m.group(1) not in _ARITY:
            raise ValueError(f"bad corruption {part.strip()!r}")
        name = m.group(1)
        args = tuple(float(a) for a in m.group(2).split(",")) if m.group(2) else ()
        if len(args) != _ARITY[name]:
            raise ValueError(f"{name} takes {_ARITY[name]} argument(s), got {len(args)}")
        _validate(name, args)
        out.append((name, args))
    return out


def _validate(name, args):
    if name == "jitter" and not 0 <= args[0] <= 0.1:
        raise ValueError("jitter sigma must lie in [0, 0.1]")
    if name == "halfspace_dropout" and not 0 <= args[0] <= 0.5:
        raise ValueError("dropout fraction must lie in [0, 0.5]")
    if name == "anisotropic_scale" and not all(0.5 <= s <= 2 for s in args):
        raise ValueError("axis scales must lie in [0.5, 2]")
    if name == "density_resample" and not args[0] >= 8:
        raise ValueError("density_resample keeps at least 8 points")


@dataclass
class DomainSpec:
    name: str
    corruption: str = "clean"
    seed: int = 0

    def __post_init__(self):
        self.steps = parse_corruption(self.corruption)


def halfspace_cut(coords: np.ndarray, fraction: float, rng) -> tuple[np.ndarray, np.ndarray, float]:
    """Random plane normal; drops the ``fraction`` of points furthest along it.

    Returns (keep mask, normal, offset): kept points satisfy ``x . normal <= offset``.
    """
    normal = _unit_vectors(rng, 1)[0]
    proj = (coords - coords.mean(axis=0)) @ normal
    offset = np.quantile(proj, 1.0 - fraction)
    keep = proj <= offset
    return keep, normal, float(offset + coords.mean(axis=0) @ normal)


def apply_domain(cloud: PointCloud, spec: DomainSpec, rng: np.random.Generator) -> PointCloud:
    pts = cloud.coords.copy()
    n = len(pts)
    for name, args in spec.steps:
        if name == "jitter" and args[0] > 0:
            pts = pts + rng.normal(0.0, args[0], size=pts.shape)
        elif name == "halfspace_dropout" and args[0] > 0:
            keep, _, _ = halfspace_cut(pts, args[0], rng)
            survivors = pts[keep]
            pts = survivors[rng.integers(0, len(survivors), size=n)]
        elif name == "anisotropic_scale":
            pts = pts * np.asarray(args)
        elif name == "density_resample":
            m = min(int(args[0]), n)
            base = pts[rng.choice(n, size=m, replace=False)]
            pts = np.concatenate([base, base[rng.integers(0, m, size=n - m)]])
    return cloud.with_coords(pts)


def preprocess(
    cloud: PointCloud,
    train: bool,
    rng: np.random.Generator | None = None,
    scale_range: tuple[float, float] = (0.8, 1.2),
    jitter_sigma: float = 0.01,
    jitter_clip: float = 0.05,
) -> PointCloud:
    """Centre, scale to unit radius; in training also random scale and clipped jitter."""
    pts = cloud.coords - cloud.coords.mean(axis=0)
    radius = np.sqrt(np.max(np.sum(pts * pts, axis=1)))
    if radius == 0:
        raise DegenerateCloud(f"cloud {cloud.id!r} has all points coincident")
    pts = pts / radius
    if train:
        if rng is None:
            raise ValueError("training preprocessing needs an rng")
        pts = pts * rng.uniform(*scale_range)
        pts = pts + np.clip(rng.normal(0.0, jitter_sigma, size=pts.shape), -jitter_clip, jitter_clip)
    return cloud.with_coords(pts)


# -------------------------------------------------------------------- file IO


def write_cloud(cloud: PointCloud, path) -> None:
    lines = [f"N {len(cloud)} {cloud.label} {cloud.domain_id}"]
    lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in cloud.coords.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path) -> PointCloud:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ParseError("empty file", path, 1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != "N":
        raise ParseError("header must read 'N <count> <label> <domain_id>'", path, 1)
    try:
        count, label, domain = int(head[1]), int(head[2]), int(head[3])
    except ValueError as exc:
        raise ParseError(f"bad header field: {exc}", path, 1) from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise CountMismatch(f"{path}: header declares {count} points, found {len(body)}")
    coords = np.empty((count, 3))
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 3:
            raise ParseError("expected 'x y z'", path, i + 2)
        try:
            coords[i] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"not a number in {ln!r}", path, i + 2) from None
    return PointCloud(coords, label=label, domain_id=domain, id=path.stem)


# ------------------------------------------------------------------- manifest


@dataclass
class Manifest:
    classes: tuple[str, ...] = CLASS_NAMES
    domains: list[DomainSpec] = field(default_factory=lambda: default_domains())
    points: int = 1024
    train_per_class: int = 200
    test_per_class: int = 50
    seed: int = 0

    def __post_init__(self):
        if len(self.domains) < 3:
            raise ConfigError("leave-one-out needs at least 3 domains (2 sources per task)")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigError("domain names must be unique")

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def counts(self, split: str) -> int:
        return self.train_per_class if split == "train" else self.test_per_class


def default_domains() -> list[DomainSpec]:
    return [
        DomainSpec("clean", "clean", 1),
        DomainSpec("noisy", "jitter(0.04)", 2),
        DomainSpec("occluded", "halfspace_dropout(0.4)", 3),
        DomainSpec("stretched", "anisotropic_scale(1.5, 1.0, 0.7)", 4),
    ]


def manifest_to_text(m: Manifest) -> str:
    sections = {
        "manifest": {
            "seed": m.seed,
            "classes": ", ".join(m.classes),
            "points": m.points,
            "train_per_class": m.train_per_class,
            "test_per_class": m.test_per_class,
        }
    }
    for d in m.domains:
        sections[f"domain {d.name}"] = {"corruption": d.corruption, "seed": d.seed}
    return render_kv(sections)


def load_manifest(path) -> Manifest:
    cfg = parse_kv_file(path)
    top = cfg.section("manifest")
    domains = []
    for name in cfg.sections():
        if name.startswith("domain "):
            sec = cfg.section(name)
            domains.append(
                DomainSpec(
                    name[len("domain "):].strip(),
                    sec.get_str("corruption", "clean", check=parse_corruption),
                    sec.get_int("seed", 0),
                )
            )
    kwargs = dict(
        seed=top.get_int("seed", 0),
        points=top.get_int("points", 1024),
        train_per_class=top.get_int("train_per_class", 200),
        test_per_class=top.get_int("test_per_class", 50),
    )
    if "classes" in top:
        kwargs["classes"] = tuple(c.strip() for c in top.get_str("classes").split(","))
        for c in kwargs["classes"]:
            if c not in _SHAPES:
                raise ConfigError(f"{path}:{top.line('classes')}: unknown class {c!r}")
    if domains:
        kwargs["domains"] = domains
    top.check_unused()
    return Manifest(**kwargs)


def sample_id(domain: str, split: str, cls: str, idx: int) -> str:
    return f"{domain}-{split}-{cls}-{idx:04d}"


def parse_sample_id(sid: str) -> tuple[str, str, str, int]:
    domain, split, cls, idx = sid.rsplit("-", 3)
    return domain, split, cls, int(idx)


def make_sample(m: Manifest, domain_index: int, split: str, label: int, idx: int) -> PointCloud:
    spec = m.domains[domain_index]
    sid = sample_id(spec.name, split, m.classes[label], idx)
    rng = make_rng(derive_seed(m.seed, spec.seed, sid))
    cloud = generate_shape(label, m.points, rng, m.classes)
    cloud = apply_domain(cloud, spec, rng)
    return PointCloud(cloud.coords, label=label, domain_id=domain_index, id=sid)


def build_benchmark(m: Manifest, root, force: bool = False) -> dict[str, dict[str, list[int]]]:
    """Materialise every domain's samples and one task file per held-out domain.

    Returns per-domain, per-split class counts.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} is not empty; use --force (force=True) to overwrite")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.cfg").write_text(manifest_to_text(m))
    ids: dict[str, dict[str, list[str]]] = {}
    counts: dict[str, dict[str, list[int]]] = {}
    for di, spec in enumerate(m.domains):
        ids[spec.name] = {}
        counts[spec.name] = {}
        for split in SPLITS:
            out_dir = root / "domains" / spec.name / split
            out_dir.mkdir(parents=True)
            split_ids = []
            per_class = [0] * len(m.classes)
            for label in range(len(m.classes)):
                for idx in range(m.counts(split)):
                    cloud = make_sample(m, di, split, label, idx)
                    write_cloud(cloud, out_dir / f"{cloud.id}.xyz")
                    split_ids.append(cloud.id)
                    per_class[label] += 1
            ids[spec.name][split] = split_ids
            counts[spec.name][split] = per_class
    tasks = root / "tasks"
    tasks.mkdir()
    for target in m.domain_names:
        sources = [d for d in m.domain_names if d != target]
        lists = {
            "source_train": [i for d in sources for i in ids[d]["train"]],
            "source_val": [i for d in sources for i in ids[d]["test"]],
            "target_test": list(ids[target]["test"]),
        }
        write_task(tasks / f"{target}.txt", target, lists)
    return counts


def write_task(path, target: str, lists: dict[str, list[str]]) -> None:
    lines = [f"target = {target}"]
    for sec in TASK_SECTIONS:
        lines.append(f"[{sec}]")
        lines.extend(lists[sec])
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Task:
    target: str
    source_train: list[str]
    source_val: list[str]
    target_test: list[str]


def read_task(path) -> Task:
    path = Path(path)
    target = None
    lists: dict[str, list[str]] = {s: [] for s in TASK_SECTIONS}
    current = None
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in lists:
                raise ParseError(f"unknown section [{current}]", path, n)
        elif current is None:
            key, sep, value = line.partition("=")
            if not sep or key.strip() != "target":
                raise ParseError("expected 'target = <domain>'", path, n)
            target = value.strip()
        else:
            lists[current].append(line)
    if target is None:
        raise ParseError("missing target line", path, 1)
    return Task(target, lists["source_train"], lists["source_val"], lists["target_test"])


class CloudStore:
    """Reads samples of a materialised benchmark and logs every id it serves."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "domains").is_dir():
            raise FileNotFoundError(f"no benchmark at {self.root} (run gen-data first)")
        self.reads: list[str] = []
        self._cache: dict[str, PointCloud] = {}

    def path_of(self, sid: str) -> Path:
        domain, split, _, _ = parse_sample_id(sid)
        return self.root / "domains" / domain / split / f"{sid}.xyz"

    def load(self, sid: str) -> PointCloud:
        self.reads.append(sid)
        if sid not in self._cache:
            self._cache[sid] = read_cloud(self.path_of(sid))
        return self._cache[sid]

    def task(self, target: str) -> Task:
        path = self.root / "tasks" / f"{target}.txt"
        if not path.is_file():
            raise FileNotFoundError(f"no task file for target {target!r} under {self.root}")
        return read_task(path)

    def manifest(self) -> Manifest:
        return load_manifest(self.root / "manifest.cfg")
