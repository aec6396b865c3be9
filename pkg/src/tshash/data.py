"""Synthetic clustered datasets, role splits, and pairwise ground truth.

Items carry one of four roles.  Queries are held out for evaluation;
everything else is searchable database, part of which doubles as the
training pool (a labeled slice plus the unlabeled rest).  Labels of
train-unlabeled items are stored for evaluation but firewalled from the
trainer: TrainingView simply does not carry them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

TRAIN_LABELED = 0
TRAIN_UNLABELED = 1
QUERY = 2
DATABASE = 3

ROLE_NAMES = {
    TRAIN_LABELED: "train-labeled",
    TRAIN_UNLABELED: "train-unlabeled",
    QUERY: "query",
    DATABASE: "database",
}

_DATA_MAGIC = b"PTSD"
_DATA_VERSION = 1


@dataclass
class Dataset:
    features: np.ndarray  # [n, d] float64
    labels: np.ndarray  # [n] int32
    roles: np.ndarray  # [n] uint8
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def mask(self, role: int) -> np.ndarray:
        return self.roles == role

    def database_mask(self) -> np.ndarray:
        """Everything searchable: all items except held-out queries."""
        return self.roles != QUERY

    def role_counts(self) -> dict[str, int]:
        return {
            name: int((self.roles == role).sum()) for role, name in ROLE_NAMES.items()
        }

    def training_view(self) -> "TrainingView":
        labeled = self.mask(TRAIN_LABELED)
        unlabeled = self.mask(TRAIN_UNLABELED)
        return TrainingView(
            labeled_features=self.features[labeled],
            labeled_labels=self.labels[labeled].copy(),
            unlabeled_features=self.features[unlabeled],
        )


@dataclass
class TrainingView:
    """What the trainer may see: labels exist only on the labeled slice."""

    labeled_features: np.ndarray
    labeled_labels: np.ndarray
    unlabeled_features: np.ndarray

    @property
    def dim(self) -> int:
        return self.labeled_features.shape[1]

    @property
    def n_labeled(self) -> int:
        return self.labeled_features.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.unlabeled_features.shape[0]


def generate_blobs(
    classes: int, per_class: int, d: int, spread: float, seed: int
) -> Dataset:
    """Gaussian clusters around class centers drawn on the unit sphere.

    Per-coordinate noise std is `spread`; spread=0 collapses every point
    onto its center.  Deterministic per seed.  All items start in the
    plain database role; use split() to assign the training protocol.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes, got %d" % classes)
    if per_class < 10:
        raise ValueError("need at least 10 items per class, got %d" % per_class)
    if d < 1:
        raise ValueError("degenerate feature dim %d" % d)
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes, dtype=np.int32), per_class)
    features = centers[labels] + spread * rng.normal(size=(labels.size, d))
    return Dataset(
        features=features,
        labels=labels,
        roles=np.full(labels.size, DATABASE, dtype=np.uint8),
        n_classes=classes,
        meta={
            "generator": "blobs",
            "seed": int(seed),
            "classes": int(classes),
            "per_class": int(per_class),
            "d": int(d),
            "spread": float(spread),
        },
    )


def split(
    dataset: Dataset, labeled_fraction: float, queries_per_class: int, rng
) -> Dataset:
    """Assign roles: per class a fixed query count, then a global
    labeled_fraction sample of the remaining pool as train-labeled, the
    rest train-unlabeled.  Returns a new Dataset; features are shared.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(
            "labeled_fraction must lie in (0, 1]; nothing to supervise at 0"
        )
    if queries_per_class < 1:
        raise ValueError("queries_per_class must be >= 1")
    rng = np.random.default_rng(rng)
    roles = np.full(len(dataset), TRAIN_UNLABELED, dtype=np.uint8)
    for c in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == c)
        if members.size <= queries_per_class:
            raise ValueError(
                "class %r has %d items, not enough for %d queries plus database"
                % (c, members.size, queries_per_class)
            )
        picks = rng.choice(members, size=queries_per_class, replace=False)
        roles[picks] = QUERY
    pool = np.flatnonzero(roles != QUERY)
    n_labeled = int(round(labeled_fraction * pool.size))
    if n_labeled < 1:
        raise ValueError("labeled_fraction %r selects no labeled items" % labeled_fraction)
    labeled = rng.choice(pool, size=n_labeled, replace=False)
    roles[labeled] = TRAIN_LABELED
    return Dataset(
        features=dataset.features,
        labels=dataset.labels,
        roles=roles,
        n_classes=dataset.n_classes,
        meta=dict(
            dataset.meta,
            labeled_fraction=float(labeled_fraction),
            queries_per_class=int(queries_per_class),
        ),
    )


def pair_label(label_i, label_j) -> int:
    """1 iff the pair counts as similar: equal labels, or for set-valued
    labels at least one shared tag."""
    if isinstance(label_i, (set, frozenset)) or isinstance(label_j, (set, frozenset)):
        return int(bool(set(label_i) & set(label_j)))
    return int(label_i == label_j)


def similar_fraction(labels: np.ndarray) -> float:
    """Fraction of similar pairs among all distinct ordered pairs; used
    as the default pseudo-pair budget rho."""
    labels = np.asarray(labels)
    n = labels.size
    if n < 2:
        raise ValueError("need at least 2 labeled items to measure pair fraction")
    _, counts = np.unique(labels, return_counts=True)
    similar = np.sum(counts * (counts - 1))
    return float(similar) / float(n * (n - 1))


def save_dataset(path, dataset: Dataset) -> None:
    """Dataset file: magic, version, n, d, class count (uint32 LE),
    float32 LE features row-major, int32 LE labels, role bytes.
    Generator metadata is not persisted."""
    n, d = dataset.features.shape
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<IIII", _DATA_VERSION, n, d, dataset.n_classes))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(dataset.roles, dtype=np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DATA_MAGIC:
            raise ValueError("not a dataset file (bad magic %r)" % magic)
        version, n, d, n_classes = struct.unpack("<IIII", fh.read(16))
        if version != _DATA_VERSION:
            raise ValueError("unsupported dataset file version %d" % version)
        features = np.frombuffer(fh.read(4 * n * d), dtype="<f4")
        features = features.reshape(n, d).astype(np.float64)
        labels = np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int32)
        roles = np.frombuffer(fh.read(n), dtype=np.uint8).copy()
    return Dataset(
        features=features,
        labels=labels,
        roles=roles,
        n_classes=n_classes,
        meta={"source": str(path)},
    )


def import_csv(path) -> Dataset:
    """Plain CSV with a header row: d feature columns then a label
    column.  Every imported item gets the plain database role."""
    with open(path) as fh:
        n_cols = len(fh.readline().rstrip("\n").split(","))
    if n_cols < 2:
        raise ValueError("CSV needs at least one feature column plus a label")
    raw = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    raw = raw.reshape(-1, n_cols)
    features = raw[:, :-1]
    labels = raw[:, -1].astype(np.int32)
    return Dataset(
        features=features,
        labels=labels,
        roles=np.full(labels.size, DATABASE, dtype=np.uint8),
        n_classes=int(np.unique(labels).size),
        meta={"source": str(path)},
    )
