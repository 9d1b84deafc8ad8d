"""Synthetic LiDAR-like scenes with controllable domain shift.

Objects are hollow boxes (four sides and a roof) sampled with a density that
falls off with the squared distance to the sensor. Background clutter sits
near the ground. The rain proxy drops points at random and sprinkles spurious
returns; it is a stand-in, not a physical weather model.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Box3D, boxes_to_array, iou_bev_arrays
from .rng import stream

REF_DISTANCE = 10.0
MIN_DISTANCE = 3.0
MAX_PLACEMENT_ATTEMPTS = 100


class LabelAccessError(PermissionError):
    """Raised when training code asks for labels of a label-withheld dataset."""


@dataclass(frozen=True)
class ClassPrior:
    name: str
    size_mean: tuple[float, float, float]  # l, w, h
    size_std: tuple[float, float, float]
    frequency: float = 1.0

    def __post_init__(self):
        for m, s in zip(self.size_mean, self.size_std):
            if s < 0 or m <= 3.0 * s:
                raise ValueError(f"{self.name}: size mean must exceed 3x its std")
        object.__setattr__(self, "size_mean", tuple(float(v) for v in self.size_mean))
        object.__setattr__(self, "size_std", tuple(float(v) for v in self.size_std))


@dataclass(frozen=True)
class DomainSpec:
    name: str = "source"
    classes: tuple[ClassPrior, ...] = ()
    objects_per_scene: tuple[int, int] = (4, 8)
    base_rate: float = 6.0  # shell points per m^2 at REF_DISTANCE
    clutter_rate: float = 0.05  # ground points per m^2
    clutter_height: float = 0.3
    dropout: float = 0.0
    spurious_rate: float = 0.0  # rain returns per m^2
    sensor_range: float = 10.0
    seed_namespace: int = 0

    def __post_init__(self):
        rates = (self.base_rate, self.clutter_rate, self.clutter_height, self.spurious_rate)
        if min(rates) < 0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("domain rates must be non-negative and dropout in [0, 1)")
        lo, hi = self.objects_per_scene
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_scene must be an ordered non-negative range")
        if not self.classes:
            object.__setattr__(self, "classes", default_classes())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["classes"] = tuple(ClassPrior(c["name"], tuple(c["size_mean"]), tuple(c["size_std"]),
                                        c.get("frequency", 1.0)) for c in d.get("classes", ()))
        d["objects_per_scene"] = tuple(d.get("objects_per_scene", (4, 8)))
        return cls(**d)


def default_classes(scale=(1.0, 1.0, 1.0)) -> tuple[ClassPrior, ...]:
    sl, sw, sh = scale
    return (
        ClassPrior("car", (3.9 * sl, 1.6 * sw, 1.5 * sh), (0.2, 0.08, 0.07), 0.5),
        ClassPrior("pedestrian", (0.8 * sl, 0.6 * sw, 1.75 * sh), (0.1, 0.06, 0.1), 0.25),
        ClassPrior("cyclist", (1.75 * sl, 0.6 * sw, 1.7 * sh), (0.12, 0.06, 0.08), 0.25),
    )


@dataclass
class Scene:
    points: np.ndarray  # (n, 3) float64 holding float32-representable values
    labels: list[Box3D]
    index: int = 0
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------- sampling

def shell_area(l: float, w: float, h: float) -> float:
    return 2.0 * (l + w) * h + l * w


def expected_object_points(box: Box3D, spec: DomainSpec) -> float:
    d = max(MIN_DISTANCE, math.hypot(box.cx, box.cy))
    return spec.base_rate * shell_area(box.l, box.w, box.h) * (REF_DISTANCE / d) ** 2


def object_points(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the four side faces and the roof of ``box``."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    local = np.empty((count, 3))
    # faces: +w side, -w side, +l end, -l end, roof
    local[:, 0] = np.select([face <= 1, face == 2, face == 3], [u * l, 0.5 * l, -0.5 * l], u * l)
    local[:, 1] = np.select([face == 0, face == 1, face <= 3], [0.5 * w, -0.5 * w, u * w], v * w)
    local[:, 2] = np.where(face == 4, 0.5 * h, v * h)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = box.cx + local[:, 0] * c - local[:, 1] * s
    world[:, 1] = box.cy + local[:, 0] * s + local[:, 1] * c
    world[:, 2] = box.cz + local[:, 2]
    return world


def _sample_size(prior: ClassPrior, rng: np.random.Generator) -> tuple[float, float, float]:
    out = []
    for m, s in zip(prior.size_mean, prior.size_std):
        v = rng.normal(m, s)
        while v <= 0.0:
            v = rng.normal(m, s)
        out.append(float(v))
    return tuple(out)


def place_boxes(spec: DomainSpec, rng: np.random.Generator) -> tuple[list[Box3D], int]:
    """Rejection-sample non-overlapping boxes; returns (boxes, placement failures)."""
    lo, hi = spec.objects_per_scene
    n = int(rng.integers(lo, hi + 1))
    freqs = np.array([c.frequency for c in spec.classes], dtype=np.float64)
    freqs = freqs / freqs.sum()
    boxes: list[Box3D] = []
    failures = 0
    margin = 1.0
    for _ in range(n):
        c = int(rng.choice(len(spec.classes), p=freqs))
        l, w, h = _sample_size(spec.classes[c], rng)
        placed = False
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            r = spec.sensor_range - margin - 0.5 * l
            x, y = rng.uniform(-r, r, size=2)
            yaw = rng.uniform(-math.pi, math.pi)
            if math.hypot(x, y) < MIN_DISTANCE:
                continue
            cand = Box3D(float(x), float(y), 0.5 * h, l, w, h, float(yaw), class_id=c)
            if boxes:
                # inflate footprints slightly so neighbours never touch
                grown = boxes_to_array([replace(cand, l=l + 0.3, w=w + 0.3)])
                if iou_bev_arrays(grown, boxes_to_array(boxes)).max() > 0.0:
                    continue
            boxes.append(cand)
            placed = True
            break
        failures += not placed
    return boxes, failures


def sample_scene(spec: DomainSpec, seed: int, index: int = 0) -> Scene:
    """Generate scene ``index`` of the dataset keyed by ``(spec, seed)``."""
    key = (spec.seed_namespace, seed, index)
    boxes, failures = place_boxes(spec, stream(*key, "layout"))
    prng = stream(*key, "points")
    chunks, owners = [], []
    for j, box in enumerate(boxes):
        count = int(prng.poisson(expected_object_points(box, spec)))
        chunks.append(object_points(box, count, prng))
        owners.append(np.full(count, j))
    area = (2.0 * spec.sensor_range) ** 2
    crng = stream(*key, "clutter")
    n_clutter = int(crng.poisson(spec.clutter_rate * area))
    clutter = np.column_stack([
        crng.uniform(-spec.sensor_range, spec.sensor_range, size=(n_clutter, 2)),
        crng.uniform(0.0, spec.clutter_height, size=n_clutter),
    ])
    chunks.append(clutter)
    owners.append(np.full(n_clutter, -1))
    pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    own = np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64)
    n_clean = len(pts)
    if spec.dropout > 0.0:
        keep = stream(*key, "dropout").uniform(size=len(pts)) >= spec.dropout
        pts, own = pts[keep], own[keep]
    n_spurious = 0
    if spec.spurious_rate > 0.0:
        srng = stream(*key, "spurious")
        n_spurious = int(srng.poisson(spec.spurious_rate * area))
        rain = np.column_stack([
            srng.uniform(-spec.sensor_range, spec.sensor_range, size=(n_spurious, 2)),
            srng.uniform(0.0, 2.5, size=n_spurious),
        ])
        pts = np.concatenate([pts, rain])
        own = np.concatenate([own, np.full(n_spurious, -1)])
    hits = np.bincount(own[own >= 0], minlength=len(boxes)) if len(boxes) else np.zeros(0)
    labels = [b for j, b in enumerate(boxes) if hits[j] > 0]
    pts = pts.astype(np.float32).astype(np.float64)
    diag = {"placement_failures": failures, "empty_labels_dropped": len(boxes) - len(labels),
            "clean_points": n_clean, "spurious_points": n_spurious, "points": len(pts)}
    return Scene(pts, labels, index, diag)


# ---------------------------------------------------------------- datasets

class Dataset:
    """Scenes plus their generating spec; labels can be withheld from training."""

    def __init__(self, scenes, spec: DomainSpec, seed: int, splits=None, labels_visible=True):
        self._scenes = list(scenes)
        self.spec = spec
        self.seed = seed
        self.splits = list(splits) if splits is not None else ["train"] * len(self._scenes)
        self.labels_visible = labels_visible

    def __len__(self) -> int:
        return len(self._scenes)

    def points(self, i: int) -> np.ndarray:
        return self._scenes[i].points

    def labels(self, i: int) -> list[Box3D]:
        if not self.labels_visible:
            raise LabelAccessError("labels of this dataset are withheld during training")
        return self._scenes[i].labels

    def scene_id(self, i: int) -> str:
        return f"{self.spec.name}-{self._scenes[i].index:06d}"

    def indices(self, split: str | None = None) -> list[int]:
        return [i for i, s in enumerate(self.splits) if split is None or s == split]

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        return Dataset([self._scenes[i] for i in idx], self.spec, self.seed,
                       [self.splits[i] for i in idx], self.labels_visible)

    def hidden(self) -> "Dataset":
        return Dataset(self._scenes, self.spec, self.seed, self.splits, labels_visible=False)

    def eval_view(self) -> "Dataset":
        return Dataset(self._scenes, self.spec, self.seed, self.splits, labels_visible=True)

    def scenes(self):
        if not self.labels_visible:
            raise LabelAccessError("labels of this dataset are withheld during training")
        return list(self._scenes)

    def label_stats(self) -> dict:
        """Mean (l, w, h) per class id over all labels."""
        out = {}
        boxes = [b for s in self.scenes() for b in s.labels]
        for c in sorted({b.class_id for b in boxes}):
            arr = np.array([[b.l, b.w, b.h] for b in boxes if b.class_id == c])
            out[c] = arr.mean(axis=0)
        return out

    # -- persistence
    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        meta = {"spec": self.spec.to_dict(), "seed": self.seed, "splits": self.splits,
                "indices": [s.index for s in self._scenes]}
        (root / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        for s in self._scenes:
            stem = f"{s.index:06d}"
            (root / f"{stem}.bin").write_bytes(s.points.astype("<f4").tobytes())
            (root / f"{stem}.labels.json").write_text(
                json.dumps([b.to_dict() for b in s.labels], sort_keys=True))

    @classmethod
    def load(cls, root, labels_visible: bool = True) -> "Dataset":
        root = Path(root)
        meta = json.loads((root / "spec.json").read_text())
        scenes = []
        for idx in meta["indices"]:
            stem = f"{idx:06d}"
            pts = np.frombuffer((root / f"{stem}.bin").read_bytes(), dtype="<f4")
            labels = [Box3D.from_dict(d) for d in json.loads((root / f"{stem}.labels.json").read_text())]
            scenes.append(Scene(pts.reshape(-1, 3).astype(np.float64), labels, idx))
        return cls(scenes, DomainSpec.from_dict(meta["spec"]), meta["seed"], meta["splits"],
                   labels_visible)


def worker_count() -> int:
    env = os.environ.get("STAL3D_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _gen(args):
    spec, seed, i = args
    return sample_scene(spec, seed, i)


def make_dataset(spec: DomainSpec, n: int, seed: int, val_fraction: float = 0.0,
                 labels_visible: bool = True) -> Dataset:
    jobs = [(spec, seed, i) for i in range(n)]
    workers = min(worker_count(), max(1, n // 50))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            scenes = list(pool.map(_gen, jobs, chunksize=16))
    else:
        scenes = [_gen(j) for j in jobs]
    n_val = int(round(val_fraction * n))
    splits = ["train"] * (n - n_val) + ["val"] * n_val
    return Dataset(scenes, spec, seed, splits, labels_visible)


def make_domain_pair(source_spec: DomainSpec, target_spec: DomainSpec, sizes=(100, 100),
                     seeds=(0, 1), val_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Labelled source set and a target set whose labels are withheld."""
    src = make_dataset(source_spec, sizes[0], seeds[0])
    tgt = make_dataset(target_spec, sizes[1], seeds[1], val_fraction, labels_visible=False)
    return src, tgt


# ---------------------------------------------------------------- presets

def source_domain() -> DomainSpec:
    return DomainSpec(name="source", classes=default_classes(), seed_namespace=1)


def preset(name: str) -> tuple[DomainSpec, DomainSpec]:
    """(source, target) spec pairs along the shift axes used in experiments."""
    src = source_domain()
    if name == "identical":
        return src, replace(src, name="target")
    if name == "size_shift":
        tgt = replace(src, name="target", seed_namespace=2,
                      classes=default_classes((1.2, 1.1, 1.1)))
        return src, tgt
    if name == "density_shift":
        return src, replace(src, name="target", seed_namespace=2, base_rate=src.base_rate * 0.4)
    if name == "rain":
        return src, replace(src, name="target", seed_namespace=2, dropout=0.3, spurious_rate=0.02)
    if name == "size_density_shift":
        tgt = replace(src, name="target", seed_namespace=2, base_rate=src.base_rate * 0.4,
                      classes=default_classes((1.2, 1.1, 1.1)))
        return src, tgt
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("identical", "size_shift", "density_shift", "rain", "size_density_shift")
