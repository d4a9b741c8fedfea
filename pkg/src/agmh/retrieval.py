"""Bit-packed binary codes, Hamming ranking and retrieval metrics.

Bit ``j`` of a code lives in word ``j // 64`` at position ``j % 64``; a set bit
means the coordinate is +1. Unused high bits of the last word stay zero.
"""

import csv
import io
import struct
import time
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, FormatError
from .synth import _Reader

CODE_MAGIC = b"AGMHCODE"
CODE_VERSION = 1

# byte -> number of set bits
_POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def n_words(nbits):
    return (nbits + 63) // 64


@dataclass(frozen=True)
class PackedCode:
    words: tuple
    nbits: int


def pack_array(codes):
    """Pack an (n, l) array of +-1 into an (n, ceil(l/64)) uint64 array."""
    u = np.asarray(codes)
    if u.ndim != 2:
        raise ArgumentError(f"expected an (n, l) code matrix, got shape {u.shape}")
    if not np.all((u == 1) | (u == -1)):
        raise ArgumentError("codes must contain only -1 and +1")
    n, nbits = u.shape
    bits = np.zeros((n, n_words(nbits) * 64), dtype=np.uint8)
    bits[:, :nbits] = u > 0
    # little-endian bit order inside each byte, little-endian bytes inside each word
    packed = np.packbits(bits, axis=1, bitorder="little")
    return packed.view("<u8").astype(np.uint64).reshape(n, n_words(nbits))


def unpack_array(words, nbits):
    w = np.ascontiguousarray(words, dtype="<u8")
    bits = np.unpackbits(w.view(np.uint8).reshape(len(w), -1), axis=1, bitorder="little")
    return np.where(bits[:, :nbits] == 1, 1, -1).astype(np.int8)


def pack(u) -> PackedCode:
    u = np.asarray(u)
    return PackedCode(tuple(int(x) for x in pack_array(u[None, :])[0]), len(u))


def unpack(code: PackedCode):
    return unpack_array(np.array([code.words], dtype=np.uint64), code.nbits)[0]


def popcount(words):
    """Set-bit count summed over the last axis of a uint64 array."""
    w = np.ascontiguousarray(words, dtype=np.uint64)
    return _POPCOUNT8[w.view(np.uint8)].reshape(*w.shape, 8).sum(axis=(-1, -2), dtype=np.int64)


def hamming(a: PackedCode, b: PackedCode) -> int:
    if a.nbits != b.nbits:
        raise ArgumentError(f"code lengths differ: {a.nbits} vs {b.nbits}")
    x = np.array(a.words, dtype=np.uint64) ^ np.array(b.words, dtype=np.uint64)
    return int(popcount(x))


def hamming_to_all(query_words, db_words):
    """Distances from one packed query (w,) to every packed row (m, w)."""
    return popcount(np.bitwise_xor(db_words, query_words[None, :]))


@dataclass
class CodeDatabase:
    words: np.ndarray  # m x n_words uint64
    nbits: int
    ids: np.ndarray  # m uint64
    labels: np.ndarray  # m int

    def __post_init__(self):
        if not (len(self.words) == len(self.ids) == len(self.labels)):
            raise ArgumentError("codes, ids and labels must have equal length")
        if self.words.ndim != 2 or self.words.shape[1] != n_words(self.nbits):
            raise ArgumentError(f"packed codes have shape {self.words.shape} for {self.nbits} bits")

    @classmethod
    def from_codes(cls, codes, ids, labels):
        codes = np.asarray(codes)
        return cls(pack_array(codes), codes.shape[1], np.asarray(ids, dtype=np.uint64),
                   np.asarray(labels, dtype=np.int64))

    def __len__(self):
        return len(self.words)

    def code(self, i) -> PackedCode:
        return PackedCode(tuple(int(x) for x in self.words[i]), self.nbits)

    def codes(self):
        return unpack_array(self.words, self.nbits)


def rank(query: PackedCode, db: CodeDatabase):
    """Database indices by ascending Hamming distance, ties by ascending index."""
    order, _ = rank_with_distances(query, db)
    return order


def rank_with_distances(query: PackedCode, db: CodeDatabase):
    if len(db) == 0:
        raise ArgumentError("cannot rank against an empty database")
    if query.nbits != db.nbits:
        raise ArgumentError(f"query has {query.nbits} bits, database has {db.nbits}")
    d = hamming_to_all(np.array(query.words, dtype=np.uint64), db.words)
    order = np.argsort(d, kind="stable")
    return order, d[order]


def average_precision(relevant_in_order):
    """AP over a full ranking given a boolean relevance vector in rank order."""
    rel = np.asarray(relevant_in_order, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise ArgumentError("no relevant items")
    hits = np.cumsum(rel)
    positions = np.arange(1, len(rel) + 1)
    return float(np.sum(hits[rel] / positions[rel]) / total)


def _query_relevance(qcode, qid, qlabel, db):
    order, _ = rank_with_distances(qcode, db)
    keep = db.ids[order] != np.uint64(qid)
    order = order[keep]
    return order, db.labels[order] == qlabel


def mean_average_precision(query_codes, query_labels, db: CodeDatabase, query_ids=None):
    """All-database mAP with same-label relevance.

    ``query_codes`` is an (n, l) +-1 array. Database entries whose id equals the
    query id are dropped from that query's ranking.
    """
    q = pack_array(query_codes)
    labels = np.asarray(query_labels)
    ids = np.full(len(q), np.iinfo(np.uint64).max, dtype=np.uint64) if query_ids is None \
        else np.asarray(query_ids, dtype=np.uint64)
    aps = []
    for i in range(len(q)):
        code = PackedCode(tuple(int(x) for x in q[i]), db.nbits)
        _, rel = _query_relevance(code, ids[i], labels[i], db)
        if not rel.any():
            raise ArgumentError(f"query {int(ids[i]) if query_ids is not None else i} has no relevant database items")
        aps.append(average_precision(rel))
    return float(np.mean(aps))


def precision_at_k(query_codes, query_labels, db: CodeDatabase, k, query_ids=None):
    q = pack_array(query_codes)
    labels = np.asarray(query_labels)
    ids = np.full(len(q), np.iinfo(np.uint64).max, dtype=np.uint64) if query_ids is None \
        else np.asarray(query_ids, dtype=np.uint64)
    vals = []
    for i in range(len(q)):
        code = PackedCode(tuple(int(x) for x in q[i]), db.nbits)
        _, rel = _query_relevance(code, ids[i], labels[i], db)
        vals.append(rel[:k].mean())
    return float(np.mean(vals))


# --- code file --------------------------------------------------------------


def save_codes(db: CodeDatabase, path):
    with open(path, "wb") as fh:
        fh.write(CODE_MAGIC)
        fh.write(struct.pack("<IIQ", CODE_VERSION, db.nbits, len(db)))
        for i in range(len(db)):
            fh.write(struct.pack("<QI", int(db.ids[i]), int(db.labels[i])))
            fh.write(db.words[i].astype("<u8").tobytes())


def load_codes(path) -> CodeDatabase:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    r.expect_magic(CODE_MAGIC)
    version, nbits, count = r.unpack("<IIQ", "header")
    if version != CODE_VERSION:
        raise FormatError(f"unsupported code file version {version}", 8)
    if nbits < 1:
        raise FormatError("code length must be positive", 12)
    nw = n_words(nbits)
    words = np.empty((count, nw), dtype=np.uint64)
    ids = np.empty(count, dtype=np.uint64)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        ids[i], labels[i] = r.unpack("<QI", f"record {i} header")
        words[i] = np.frombuffer(r.take(8 * nw, f"record {i} code"), dtype="<u8")
    r.done()
    if nbits % 64 and np.any(words[:, -1] >> np.uint64(nbits % 64)):
        raise FormatError("bits beyond the code length are set", None)
    return CodeDatabase(words, nbits, ids, labels)


# --- benchmark --------------------------------------------------------------

BENCH_BATCH_SIZES = (1, 4, 16, 64)
BENCH_FIELDS = ["batch_size", "repeats", "n_queries", "ms_per_query"]


def bench(encode, queries, db: CodeDatabase, repeats=3, batch_sizes=BENCH_BATCH_SIZES,
          clock=time.perf_counter):
    """Time encode-then-rank per query for each batch size.

    ``encode`` maps a batch (sequence of query inputs) to an (n, l) +-1 array.
    Batches wrap around ``queries`` when it is shorter than the batch size.
    """
    if len(queries) == 0 or len(db) == 0:
        raise ArgumentError("bench needs at least one query and one database item")
    rows = []
    for bs in batch_sizes:
        batch = [queries[i % len(queries)] for i in range(bs)]
        best = np.inf
        for _ in range(max(1, repeats)):
            t0 = clock()
            codes = pack_array(encode(batch))
            for row in codes:
                d = hamming_to_all(row, db.words)
                np.argsort(d, kind="stable")
            best = min(best, clock() - t0)
        rows.append({"batch_size": bs, "repeats": max(1, repeats), "n_queries": bs,
                     "ms_per_query": 1000.0 * best / bs})
    return rows


def rows_to_csv(rows, fields, header_lines=()):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(line.rstrip("\n") + "\n")
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


def csv_to_rows(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
