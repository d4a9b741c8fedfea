"""Synthetic fine-grained feature maps standing in for a CNN backbone, plus feature-file I/O.

Every class shares the same set of spatial "attribute sites". A fraction
``subtlety`` of the sites carry a channel pattern common to all classes; the
remaining sites carry a class-specific pattern. Items are the class signature
plus isotropic Gaussian noise.

Randomness comes from numpy's Philox-4x64 counter-based generator seeded with
the 64-bit ``seed``, so a spec fully determines its output.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, FormatError

RNG_ALGORITHM = "philox4x64"

QUERY, RETRIEVAL = "query", "retrieval"
_SPLIT_CODES = {RETRIEVAL: 0, QUERY: 1}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}

FEATURE_MAGIC = b"AGMHFEAT"
FEATURE_VERSION = 1


def make_rng(seed):
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    per_class: int = 40
    query_per_class: int = 10
    channels: int = 16
    height: int = 8
    width: int = 8
    n_attributes: int = 16
    subtlety: float = 0.5
    noise_sigma: float = 0.3
    pattern_scale: float = 1.0
    seed: int = 0

    def validate(self):
        for name in ("n_classes", "per_class", "channels", "height", "width", "n_attributes"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.query_per_class < self.per_class:
            raise ArgumentError(
                f"query_per_class must be in [0, per_class), got {self.query_per_class}"
            )
        if self.n_attributes > self.height * self.width:
            raise ArgumentError(
                f"n_attributes={self.n_attributes} exceeds H*W={self.height * self.width}"
            )
        if not 0 < self.subtlety <= 1:
            raise ArgumentError(f"subtlety must be in (0, 1], got {self.subtlety}")
        if self.pattern_scale <= 0:
            raise ArgumentError(f"pattern_scale must be positive, got {self.pattern_scale}")
        if self.noise_sigma < 0:
            raise ArgumentError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class FeatureSet:
    features: np.ndarray  # N x C x H x W float64
    labels: np.ndarray  # N int
    ids: np.ndarray  # N uint64
    splits: list  # N of "query" | "retrieval"

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.labels) == len(self.ids) == len(self.splits) == n):
            raise ArgumentError("features, labels, ids and splits must have equal length")
        if len(set(self.ids.tolist())) != n:
            raise ArgumentError("item ids must be unique")

    def __len__(self):
        return len(self.features)

    @property
    def shape(self):
        return self.features.shape[1:]

    def subset(self, split):
        mask = np.array([s == split for s in self.splits], dtype=bool)
        return FeatureSet(
            self.features[mask], self.labels[mask], self.ids[mask],
            [s for s, m in zip(self.splits, mask) if m],
        )

    def index_of(self, item_id):
        hits = np.nonzero(self.ids == np.uint64(item_id))[0]
        if len(hits) == 0:
            raise KeyError(item_id)
        return int(hits[0])


def generate(spec: SyntheticSpec) -> FeatureSet:
    spec.validate()
    rng = make_rng(spec.seed)
    c, h, w = spec.channels, spec.height, spec.width
    sites = rng.choice(h * w, size=spec.n_attributes, replace=False)
    n_shared = int(round(spec.subtlety * spec.n_attributes))
    shared = rng.normal(scale=spec.pattern_scale, size=(n_shared, c))

    signatures = np.zeros((spec.n_classes, c, h * w))
    for cls in range(spec.n_classes):
        own = rng.normal(scale=spec.pattern_scale, size=(spec.n_attributes - n_shared, c))
        patterns = np.concatenate([shared, own], axis=0)
        signatures[cls][:, sites] = patterns.T
    signatures = signatures.reshape(spec.n_classes, c, h, w)

    n = spec.n_classes * spec.per_class
    labels = np.repeat(np.arange(spec.n_classes), spec.per_class)
    noise = rng.normal(scale=spec.noise_sigma, size=(n, c, h, w)) if spec.noise_sigma > 0 else 0.0
    features = signatures[labels] + noise
    splits = [QUERY if i % spec.per_class < spec.query_per_class else RETRIEVAL for i in range(n)]
    return FeatureSet(np.ascontiguousarray(features, dtype=np.float64), labels.astype(np.int64),
                      np.arange(n, dtype=np.uint64), splits)


def similarity_matrix(labels_q, labels_db):
    """+1 where labels agree, -1 otherwise (n x m, int8)."""
    lq = np.asarray(labels_q)
    ldb = np.asarray(labels_db)
    if lq.size == 0 or ldb.size == 0:
        raise ArgumentError("similarity_matrix needs non-empty label arrays")
    return np.where(lq[:, None] == ldb[None, :], 1, -1).astype(np.int8)


def save_features(fs: FeatureSet, path):
    """Write a feature file: header, then per item id, label, split and float64 values."""
    n = len(fs)
    c, h, w = fs.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQIII", FEATURE_VERSION, n, c, h, w))
        for i in range(n):
            fh.write(struct.pack("<QIB", int(fs.ids[i]), int(fs.labels[i]), _SPLIT_CODES[fs.splits[i]]))
            fh.write(np.asarray(fs.features[i], dtype="<f8").tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def expect_magic(self, magic):
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError("trailing bytes after last record", self.pos)


def load_features(path) -> FeatureSet:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    r.expect_magic(FEATURE_MAGIC)
    (version,) = r.unpack("<I", "version")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}", r.pos - 4)
    n, c, h, w = r.unpack("<QIII", "header")
    size = c * h * w
    features = np.empty((n, c, h, w))
    labels = np.empty(n, dtype=np.int64)
    ids = np.empty(n, dtype=np.uint64)
    splits = []
    for i in range(n):
        item_id, label, split = r.unpack("<QIB", f"record {i} header")
        if split not in _SPLIT_NAMES:
            raise FormatError(f"record {i}: unknown split code {split}", r.pos - 1)
        ids[i], labels[i] = item_id, label
        splits.append(_SPLIT_NAMES[split])
        features[i] = np.frombuffer(r.take(8 * size, f"record {i} values"), dtype="<f8").reshape(c, h, w)
    r.done()
    return FeatureSet(features, labels, ids, splits)
