"""Synthetic long-tail datasets, embedding-file ingestion, and per-class statistics.

Class counts are summarized twice from the same decade boundaries: accuracy
``bins`` 1-4 for evaluation and classifier-head ``groups`` 1-4.  Both use
half-open intervals [10^(k-1), 10^k), with the top interval open-ended.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np

from .seeding import derive_seed

# Lower/upper count limits per group, half-open: low <= n < high.
GROUP_LIMITS: tuple[tuple[float, float], ...] = (
    (0.0, 10.0),
    (10.0, 100.0),
    (100.0, 1000.0),
    (1000.0, math.inf),
)

_COUNT_THRESHOLDS = (10, 100, 1000)

_HEADER_RE = re.compile(r"^C=(\d+) D=(\d+)$")


@dataclass(eq=False)
class Dataset:
    """Feature rows with integer class labels.

    features: (N, D) float64, all finite.
    labels: (N,) integers in [0, C) where C = len(class_names).
    background_class: optional index of the class treated as background/empty.
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    background_class: int | None = None

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.class_names = tuple(str(n) for n in self.class_names)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError("dataset needs at least one instance and one feature dimension")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be one per feature row")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        c = len(self.class_names)
        if c < 1:
            raise ValueError("class_names is empty")
        if self.labels.min() < 0 or self.labels.max() >= c:
            raise ValueError(f"labels must lie in [0, {c})")
        if self.background_class is not None:
            self.background_class = int(self.background_class)
            if not 0 <= self.background_class < c:
                raise ValueError(f"background_class {self.background_class} out of range [0, {c})")

    @property
    def num_instances(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def digest(self) -> str:
        """Content hash covering features, labels, names, and background flag."""
        h = hashlib.sha256()
        h.update(repr(self.features.shape).encode())
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        h.update("\x1f".join(self.class_names).encode())
        h.update(str(self.background_class).encode())
        return h.hexdigest()

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            class_names=self.class_names,
            background_class=self.background_class,
        )

    def with_background(self, background_class: int | None) -> "Dataset":
        return Dataset(self.features, self.labels, self.class_names, background_class)


@dataclass(eq=False)
class ClassStats:
    """Per-class training counts with their bin and group assignments."""

    counts: np.ndarray
    bins: np.ndarray
    groups: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        self.bins = np.ascontiguousarray(self.bins, dtype=np.int64)
        self.groups = np.ascontiguousarray(self.groups, dtype=np.int64)
        if not (self.counts.shape == self.bins.shape == self.groups.shape):
            raise ValueError("counts, bins, and groups must have one entry per class")

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])


def count_decade(n: int | np.ndarray) -> int | np.ndarray:
    """Decade index 1-4 for a training count: [1,10), [10,100), [100,1000), [1000,inf)."""
    n = np.asarray(n)
    decade = 1 + (n >= 10).astype(np.int64) + (n >= 100) + (n >= 1000)
    return decade if decade.ndim else int(decade)


def compute_class_stats(dataset: Dataset) -> ClassStats:
    """Count training instances per class and assign count bins and groups.

    Every class must appear at least once; classes with zero instances are a
    data error here, not something to drop silently.
    """
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    if (counts == 0).any():
        missing = [dataset.class_names[j] for j in np.flatnonzero(counts == 0)]
        raise ValueError(f"classes with zero training instances: {', '.join(missing)}")
    decades = count_decade(counts)
    return ClassStats(counts=counts, bins=decades, groups=decades.copy())


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometric long-tail profile over isotropic Gaussian class clusters.

    head_count instances for class 0 decaying to head_count/imbalance_factor
    for the last class.  Centroids are drawn isotropically and scaled so the
    root-mean-square pairwise centroid distance equals class_separation.
    """

    num_classes: int
    feature_dim: int
    head_count: int
    imbalance_factor: float
    class_separation: float
    noise_sigma: float
    seed: int

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.imbalance_factor <= 1:
            raise ValueError("imbalance_factor must be > 1")
        if self.head_count / self.imbalance_factor < 1:
            raise ValueError("head_count / imbalance_factor must be >= 1")
        if self.class_separation <= 0 or self.noise_sigma <= 0:
            raise ValueError("class_separation and noise_sigma must be > 0")


def synthetic_class_counts(spec: SyntheticSpec) -> np.ndarray:
    """Per-class instance counts: round(head_count * imbalance_factor^(-j/(C-1)))."""
    j = np.arange(spec.num_classes, dtype=np.float64)
    raw = spec.head_count * spec.imbalance_factor ** (-j / (spec.num_classes - 1))
    counts = np.rint(raw).astype(np.int64)
    if counts.min() < 1:
        raise ValueError("count profile rounds to zero for the smallest class")
    return counts


def _class_centroids(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(spec.seed, "centroids"))
    scale = spec.class_separation / math.sqrt(2 * spec.feature_dim)
    return rng.standard_normal((spec.num_classes, spec.feature_dim)) * scale


def generate_synthetic(
    spec: SyntheticSpec,
    counts: np.ndarray | None = None,
    noise_stream: int = 0,
) -> Dataset:
    """Draw a dataset from the spec's class-conditional Gaussians.

    Deterministic in the spec: same spec, same bytes.  ``counts`` overrides
    the per-class instance counts and ``noise_stream`` selects an independent
    noise substream; together they allow drawing extra evaluation sets from
    the same centroids as the training draw.
    """
    if counts is None:
        counts = synthetic_class_counts(spec)
    else:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (spec.num_classes,) or counts.min() < 1:
            raise ValueError("counts override must give every class at least one instance")
    centroids = _class_centroids(spec)
    rng = np.random.default_rng(derive_seed(spec.seed, "noise", noise_stream))
    blocks = []
    for c in range(spec.num_classes):
        noise = rng.standard_normal((int(counts[c]), spec.feature_dim))
        blocks.append(centroids[c] + spec.noise_sigma * noise)
    width = max(2, len(str(spec.num_classes - 1)))
    return Dataset(
        features=np.concatenate(blocks, axis=0),
        labels=np.repeat(np.arange(spec.num_classes, dtype=np.int64), counts),
        class_names=tuple(f"class_{c:0{width}d}" for c in range(spec.num_classes)),
    )


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test partition fractions."""

    train_fraction: float = 0.70
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = 0
    stratified: bool = True

    def __post_init__(self) -> None:
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if not all(0 < f < 1 for f in fracs):
            raise ValueError("each split fraction must lie in (0, 1)")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


def _allocate(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """Partition sizes for one class of n instances.

    Classes with >= 3 instances are guaranteed a slot in every partition;
    with 2 instances train and test get one each, a single instance trains.
    """
    n_val = int(round(n * spec.val_fraction))
    n_test = int(round(n * spec.test_fraction))
    n_train = n - n_val - n_test
    sizes = [n_train, n_val, n_test]
    if n >= 3:
        for part in range(3):
            while sizes[part] == 0:
                donor = int(np.argmax(sizes))
                sizes[donor] -= 1
                sizes[part] += 1
    elif n == 2:
        sizes = [1, 0, 1]
    else:
        sizes = [1, 0, 0]
    return sizes[0], sizes[1], sizes[2]


def split_dataset(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition into train/val/test, stratified per class by default."""
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        train_idx, val_idx, test_idx = [], [], []
        for c in range(dataset.num_classes):
            members = np.flatnonzero(dataset.labels == c)
            if members.size == 0:
                continue
            perm = rng.permutation(members)
            n_train, n_val, _ = _allocate(members.size, spec)
            train_idx.append(perm[:n_train])
            val_idx.append(perm[n_train:n_train + n_val])
            test_idx.append(perm[n_train + n_val:])
        parts = [np.sort(np.concatenate(p)) if p else np.empty(0, np.int64)
                 for p in (train_idx, val_idx, test_idx)]
    else:
        perm = rng.permutation(dataset.num_instances)
        n = dataset.num_instances
        cut1 = int(round(n * spec.train_fraction))
        cut2 = cut1 + int(round(n * spec.val_fraction))
        parts = [np.sort(perm[:cut1]), np.sort(perm[cut1:cut2]), np.sort(perm[cut2:])]
    for name, idx in zip(("train", "val", "test"), parts):
        if idx.size == 0:
            raise ValueError(f"dataset too small: {name} partition is empty")
    return tuple(dataset.subset(idx) for idx in parts)  # type: ignore[return-value]


def load_embeddings(path: str) -> Dataset:
    """Read a dataset from the plain-text embedding format.

    Line 1: ``C=<int> D=<int>``.  Line 2: C comma-separated class names.
    Each following line: ``<label>,<f_1>,...,<f_D>`` with an optional trailing
    ``crop=<0|1>`` field (recorded by detector pipelines, ignored here).
    Malformed content is reported with its 1-based line number.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    while lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2:
        raise ValueError("line 1: missing header or class-name line")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise ValueError(f"line 1: header must be 'C=<int> D=<int>', got {lines[0]!r}")
    num_classes, dim = int(m.group(1)), int(m.group(2))
    if num_classes < 1 or dim < 1:
        raise ValueError("line 1: C and D must be >= 1")
    names = lines[1].split(",")
    if len(names) != num_classes:
        raise ValueError(f"line 2: expected {num_classes} class names, got {len(names)}")
    if any(not n.strip() for n in names):
        raise ValueError("line 2: empty class name")

    features, labels = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        fields = line.split(",")
        if fields and fields[-1].startswith("crop="):
            crop = fields.pop()
            if crop not in ("crop=0", "crop=1"):
                raise ValueError(f"line {lineno}: crop flag must be crop=0 or crop=1")
        if len(fields) != 1 + dim:
            raise ValueError(
                f"line {lineno}: expected label plus {dim} features, got {len(fields)} fields"
            )
        try:
            label = int(fields[0])
        except ValueError:
            raise ValueError(f"line {lineno}: label {fields[0]!r} is not an integer") from None
        if not 0 <= label < num_classes:
            raise ValueError(f"line {lineno}: label {label} out of range [0, {num_classes})")
        try:
            row = [float(v) for v in fields[1:]]
        except ValueError:
            raise ValueError(f"line {lineno}: malformed feature value") from None
        if not all(math.isfinite(v) for v in row):
            raise ValueError(f"line {lineno}: non-finite feature value")
        labels.append(label)
        features.append(row)
    if not features:
        raise ValueError("no instances")
    return Dataset(
        features=np.asarray(features, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=tuple(names),
    )


def save_embeddings(dataset: Dataset, path: str) -> None:
    """Write the embedding text format; floats use repr for exact round-trips."""
    if any("," in n or "\n" in n for n in dataset.class_names):
        raise ValueError("class names must not contain commas or newlines")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"C={dataset.num_classes} D={dataset.feature_dim}\n")
        fh.write(",".join(dataset.class_names) + "\n")
        for label, row in zip(dataset.labels, dataset.features):
            fh.write(f"{int(label)}," + ",".join(repr(float(v)) for v in row) + "\n")
