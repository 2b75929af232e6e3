"""Datasets, loaders, open-set scenario construction and minibatching."""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    """Feature rows with integer labels. Arrays are made read-only."""

    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValidationError(f"features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValidationError(f"{y.shape[0]} labels for {x.shape[0]} feature rows")
        if np.any(y < 0):
            raise ValidationError("labels must be non-negative")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i):
        return self.features[i], int(self.labels[i])

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, name=None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], name or self.name)


@dataclass(frozen=True)
class OpenSetScenario:
    """Source restricted to known classes ``0..K-1``; target with unknowns as ``K``.

    ``provenance`` maps each original known label to its new index.
    Trainers only ever see ``source`` and ``target_features``; the target
    labels are reserved for evaluation.
    """

    source: Dataset
    target: Dataset
    K: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError(f"need at least one known class, got K={self.K}")
        if len(self.source) and int(self.source.labels.max()) >= self.K:
            raise ValidationError("source dataset contains labels >= K")
        if len(self.target) and int(self.target.labels.max()) > self.K:
            raise ValidationError("target dataset contains labels > K")

    @property
    def target_features(self) -> np.ndarray:
        return self.target.features

    def original_label(self, label: int):
        """Invert the relabeling for a known class; ``None`` for the unknown class."""
        for orig, new in self.provenance.items():
            if new == label:
                return orig
        return None


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    K: int = 3
    unknown_clusters: int = 2
    source_per_class: int = 50
    target_per_class: int = 50
    unknown_per_cluster: int | None = None
    width: int = 2
    shift: tuple = (0.5, 0.0)
    spread: float = 0.3
    radius: float = 3.0
    unknown_radius: float = 5.0

    def validate(self):
        for name in ("K", "source_per_class", "target_per_class", "width"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.unknown_clusters < 0:
            raise ValidationError(f"unknown_clusters must be >= 0, got {self.unknown_clusters}")
        if self.unknown_per_cluster is not None and self.unknown_per_cluster < 1:
            raise ValidationError(f"unknown_per_cluster must be >= 1, got {self.unknown_per_cluster}")
        if not self.spread > 0:
            raise ValidationError(f"spread must be > 0, got {self.spread}")
        if self.radius < 0 or self.unknown_radius < 0:
            raise ValidationError("radius and unknown_radius must be >= 0")
        if len(self.shift) > self.width:
            raise ValidationError(f"shift has {len(self.shift)} components for width {self.width}")


def _centers(cfg: SynthConfig):
    def place(angle, r):
        c = np.zeros(cfg.width)
        c[0] = r * math.cos(angle)
        if cfg.width > 1:
            c[1] = r * math.sin(angle)
        return c

    step = 2 * math.pi / cfg.K
    known = [place(k * step, cfg.radius) for k in range(cfg.K)]
    # unknown clusters sit halfway between known ones; later rounds move outwards
    unknown = []
    for j in range(cfg.unknown_clusters):
        ring = j // cfg.K
        unknown.append(place((j % cfg.K + 0.5) * step, cfg.unknown_radius * (1 + ring)))
    return known, unknown


def synth_openset(cfg: SynthConfig, seed: int) -> OpenSetScenario:
    """Gaussian blobs: K known source clusters, and a translated target copy
    plus ``unknown_clusters`` extra target clusters labeled K."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    known, unknown = _centers(cfg)
    shift = np.zeros(cfg.width)
    shift[: len(cfg.shift)] = cfg.shift
    n_unk = cfg.unknown_per_cluster or cfg.target_per_class

    xs, ys = [], []
    for k, c in enumerate(known):
        xs.append(c + cfg.spread * rng.standard_normal((cfg.source_per_class, cfg.width)))
        ys.append(np.full(cfg.source_per_class, k))
    xt, yt = [], []
    for k, c in enumerate(known):
        xt.append(c + shift + cfg.spread * rng.standard_normal((cfg.target_per_class, cfg.width)))
        yt.append(np.full(cfg.target_per_class, k))
    for c in unknown:
        xt.append(c + shift + cfg.spread * rng.standard_normal((n_unk, cfg.width)))
        yt.append(np.full(n_unk, cfg.K))
    source = Dataset(np.vstack(xs), np.concatenate(ys), "synth-source")
    target = Dataset(np.vstack(xt), np.concatenate(yt), "synth-target")
    return OpenSetScenario(source, target, cfg.K, {k: k for k in range(cfg.K)})


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _read_header(f, path, count):
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack(">" + "i" * count, raw)


def load_idx(images_path, labels_path, name: str | None = None) -> Dataset:
    """Read an IDX image/label pair (big-endian). Pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        magic, = _read_header(f, images_path, 1)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: expected image magic {IDX_IMAGE_MAGIC}, found {magic}"
            )
        n, rows, cols = _read_header(f, images_path, 3)
        pixels = np.frombuffer(f.read(), dtype=np.uint8)
    if pixels.size != n * rows * cols:
        raise FormatError(
            f"{images_path}: header promises {n}x{rows}x{cols} pixels, found {pixels.size}"
        )
    with open(labels_path, "rb") as f:
        magic, = _read_header(f, labels_path, 1)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: expected label magic {IDX_LABEL_MAGIC}, found {magic}"
            )
        n_labels, = _read_header(f, labels_path, 1)
        labels = np.frombuffer(f.read(), dtype=np.uint8)
    if labels.size != n_labels:
        raise FormatError(f"{labels_path}: header promises {n_labels} labels, found {labels.size}")
    if n_labels != n:
        raise FormatError(f"image count {n} does not match label count {n_labels}")
    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), name or os.path.basename(str(images_path)))


def write_idx(images_path, labels_path, images: np.ndarray, labels: Sequence[int]):
    """Write uint8 images of shape (n, rows, cols) and their labels as IDX files."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValidationError(f"images must be (n, rows, cols), got {images.shape}")
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv_features(path, name: str | None = None) -> Dataset:
    """Read rows of ``label,f1,...,fN``. An optional header line is skipped."""
    labels, rows = [], []
    width = None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and not _is_number(row[0]):
                continue
            if width is None:
                width = len(row) - 1
                if width < 1:
                    raise FormatError(f"{path}: line {lineno} has no feature columns")
            elif len(row) - 1 != width:
                raise FormatError(
                    f"{path}: line {lineno} has {len(row) - 1} features, expected {width}"
                )
            try:
                label = float(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
            if label != int(label):
                raise FormatError(f"{path}: line {lineno}: label {row[0]!r} is not an integer")
            labels.append(int(label))
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), name or os.path.basename(str(path)))


def write_csv_features(path, dataset: Dataset, header: bool = True):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if header:
            writer.writerow(["label"] + [f"f{i + 1}" for i in range(dataset.width)])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([int(y)] + [format(v, ".17g") for v in x])


def write_manifest(path, **entries):
    doc = {"version": MANIFEST_VERSION, **entries}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    for key in ("source", "target", "known"):
        if key not in doc:
            raise FormatError(f"{path}: manifest lacks {key!r}")
    return doc


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def unknown_count_for_ratio(n_known: int, ratio: float) -> int:
    """Number of unknown samples so that unknown / total is as close to ``ratio`` as possible."""
    if not 0.0 <= ratio < 1.0:
        raise ValidationError(f"unknown_ratio must be in [0, 1), got {ratio}")
    return int(round(ratio * n_known / (1.0 - ratio)))


def subsample_unknown(scenario: OpenSetScenario, ratio: float, seed: int) -> OpenSetScenario:
    """Keep all known target samples and a seeded uniform subset of unknown ones."""
    target = scenario.target
    unknown_idx = np.flatnonzero(target.labels == scenario.K)
    known_idx = np.flatnonzero(target.labels != scenario.K)
    want = unknown_count_for_ratio(known_idx.size, ratio)
    if want > unknown_idx.size:
        raise ValidationError(
            f"unknown_ratio {ratio} needs {want} unknown samples, only {unknown_idx.size} available"
        )
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(unknown_idx, size=want, replace=False))
    idx = np.sort(np.concatenate([known_idx, keep]))
    return OpenSetScenario(scenario.source, target.subset(idx), scenario.K, dict(scenario.provenance))


def make_scenario(
    source: Dataset,
    target: Dataset,
    known: Iterable[int],
    seed: int = 0,
    unknown_ratio: float | None = None,
) -> OpenSetScenario:
    """Relabel original class ids into an open-set scenario.

    Known labels map to ``0..K-1`` in sorted order; the source keeps only
    known classes and every other target label becomes ``K``.
    """
    known = sorted(set(int(k) for k in known))
    if not known:
        raise ValidationError("the known label set is empty")
    present = set(np.unique(source.labels).tolist())
    missing = [k for k in known if k not in present]
    if missing:
        raise ValidationError(f"known labels {missing} do not occur in the source data")
    K = len(known)
    mapping = {orig: new for new, orig in enumerate(known)}

    keep = np.isin(source.labels, known)
    src_labels = np.array([mapping[int(y)] for y in source.labels[keep]], dtype=np.int64)
    new_source = Dataset(source.features[keep], src_labels, source.name)
    tgt_labels = np.array([mapping.get(int(y), K) for y in target.labels], dtype=np.int64)
    new_target = Dataset(target.features, tgt_labels, target.name)
    scenario = OpenSetScenario(new_source, new_target, K, mapping)
    if unknown_ratio is not None:
        scenario = subsample_unknown(scenario, unknown_ratio, seed)
    return scenario


# ---------------------------------------------------------------------------
# minibatching
# ---------------------------------------------------------------------------


def _chunks(order: np.ndarray, m: int) -> list[np.ndarray]:
    return [order[i : i + m] for i in range(0, order.size, m)]


def batches(dataset, m: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index slices for one pass over ``dataset`` shuffled by ``(seed, epoch)``.

    The final batch may be short.
    """
    if m < 1:
        raise ValidationError(f"batch size must be >= 1, got {m}")
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return _chunks(order, m)


def epoch_plan(n: int, m: int, iterations: int, seed: int, stream: int, epoch: int) -> list[np.ndarray]:
    """``iterations`` batches for one epoch, cycling through reshuffled passes if needed."""
    plan: list[np.ndarray] = []
    cycle = 0
    while len(plan) < iterations:
        order = np.random.default_rng([seed, stream, epoch, cycle]).permutation(n)
        plan.extend(_chunks(order, m))
        cycle += 1
    return plan[:iterations]


def iterations_per_epoch(n_source: int, n_target: int, m: int) -> int:
    return math.ceil(max(n_source, n_target) / m)
