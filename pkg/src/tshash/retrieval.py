"""Bit-packed binary codes, Hamming ranking, and retrieval metrics.

Codes live as {-1,+1} int8 matrices at the API boundary and as uint64
words internally: bit=1 encodes +1, bit 0 of word 0 is code dimension 0,
later dimensions fill toward higher bits (little-endian within and
across words).  Padding bits beyond the code length stay zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .kernels import hamming_matrix

_CODE_MAGIC = b"PTSC"
_CODE_VERSION = 1


@dataclass
class CodeSet:
    """Packed codes for a set of items, with optional labels.

    ids are an in-memory convenience (dataset rows behind each code) used
    by callers to keep query items out of the database; they are not part
    of the on-disk format.
    """

    words: np.ndarray  # [n, n_words] uint64
    bits: int
    labels: np.ndarray | None = None  # [n] int32
    ids: np.ndarray | None = None  # [n] int64

    def __len__(self) -> int:
        return self.words.shape[0]


def n_words_for(bits: int) -> int:
    return max(1, -(-bits // 64))


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack a [n, b] matrix over {-1,+1} into [n, ceil(b/64)] uint64 words."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("expected [n, b] code matrix")
    if codes.size and not np.isin(codes, (-1, 1)).all():
        raise ValueError("codes must be -1/+1 valued")
    n, b = codes.shape
    nw = n_words_for(b)
    bits = np.zeros((n, nw * 64), dtype=np.uint8)
    bits[:, :b] = codes > 0
    # packbits default is big-endian within bytes; ask for little so bit k
    # of the word is code dimension k
    packed = np.packbits(bits, axis=1, bitorder="little")
    return packed.view("<u8").reshape(n, nw).astype(np.uint64)


def unpack_codes(words: np.ndarray, bits: int) -> np.ndarray:
    """Inverse of pack_codes: recover the [n, bits] {-1,+1} int8 matrix."""
    words = np.ascontiguousarray(words, dtype=np.uint64)
    n = words.shape[0]
    as_bytes = words.astype("<u8").view(np.uint8).reshape(n, -1)
    flat = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :bits]
    return (flat.astype(np.int8) * 2 - 1)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Hamming distance between two packed codes (1-D word arrays)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.uint64))
    b = np.atleast_2d(np.asarray(b, dtype=np.uint64))
    return int(hamming_matrix(a, b)[0, 0])


def hamming_distances(queries: np.ndarray, database: np.ndarray) -> np.ndarray:
    """All pairwise Hamming distances between packed query and database rows."""
    return hamming_matrix(queries, database)


def _rank_rows(distances: np.ndarray) -> np.ndarray:
    # stable sort on the distance key leaves equal distances in index order
    return np.argsort(distances, axis=-1, kind="stable")


def rank_database(query: np.ndarray, db: CodeSet) -> np.ndarray:
    """Database indices by ascending distance to one packed query code;
    ties break toward the lower index."""
    q = np.atleast_2d(np.asarray(query, dtype=np.uint64))
    dists = hamming_matrix(q, db.words)[0]
    return _rank_rows(dists)


def average_precision(relevance: np.ndarray, k: int) -> float:
    """AP@k over a ranked 0/1 relevance list.

    Sum of precision@rank at each relevant rank within the top k, divided
    by min(R, k) where R counts relevant items in the whole list.  R = 0
    gives 0.
    """
    relevance = np.asarray(relevance, dtype=np.float64)
    total_relevant = int(relevance.sum())
    if total_relevant == 0:
        return 0.0
    top = relevance[:k]
    precision = np.cumsum(top) / np.arange(1, top.size + 1)
    return float(np.sum(precision * top) / min(total_relevant, k))


@dataclass
class MetricsReport:
    map_at_k: float
    precision_hamming2: float
    topk_curve: list[tuple[int, float]] = field(default_factory=list)
    per_query_ap: list[float] = field(default_factory=list)
    k: int = 0
    n_queries: int = 0

    def as_dict(self) -> dict:
        return {
            "map_at_k": self.map_at_k,
            "precision_hamming2": self.precision_hamming2,
            "topk_curve": [[int(t), p] for t, p in self.topk_curve],
            "per_query_ap": list(self.per_query_ap),
            "k": self.k,
            "n_queries": self.n_queries,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def evaluate(
    queries: CodeSet,
    db: CodeSet,
    k: int | None = None,
    topk: tuple[int, ...] = (),
    radius: int = 2,
) -> MetricsReport:
    """MAP@k, mean precision inside the Hamming-radius ball, and top-k
    precisions, all averaged over queries.

    Relevance means equal labels.  Callers must keep query items out of
    the database; nothing is deduplicated here.  A query whose radius
    ball is empty contributes precision 0.
    """
    if queries.bits != db.bits:
        raise ValueError("query/database code lengths differ")
    if queries.labels is None or db.labels is None:
        raise ValueError("evaluate needs labels on both code sets")
    n_db = len(db)
    if k is None:
        k = n_db
    topk = tuple(sorted({t for t in topk if 0 < t <= n_db}))
    dists = hamming_distances(queries.words, db.words)
    order = _rank_rows(dists)
    nq = len(queries)
    ap = np.empty(nq, dtype=np.float64)
    radius_prec = np.empty(nq, dtype=np.float64)
    topk_acc = {t: np.empty(nq, dtype=np.float64) for t in topk}
    for qi in range(nq):
        rel = (db.labels[order[qi]] == queries.labels[qi]).astype(np.float64)
        ap[qi] = average_precision(rel, min(k, n_db))
        in_ball = dists[qi] <= radius
        n_ball = int(in_ball.sum())
        if n_ball == 0:
            radius_prec[qi] = 0.0
        else:
            hits = int((db.labels[in_ball] == queries.labels[qi]).sum())
            radius_prec[qi] = hits / n_ball
        for t in topk:
            topk_acc[t][qi] = float(np.sum(rel[:t]) / t)
    return MetricsReport(
        map_at_k=float(np.mean(ap)),
        precision_hamming2=float(np.mean(radius_prec)),
        topk_curve=[(t, float(np.mean(topk_acc[t]))) for t in topk],
        per_query_ap=[float(v) for v in ap],
        k=int(k),
        n_queries=nq,
    )


def save_codes(path, codes: CodeSet) -> None:
    """Code file: magic, version, n, bits (uint32 LE), a labels-present
    byte, packed words LE, then int32 LE labels if present."""
    n = len(codes)
    with open(path, "wb") as fh:
        fh.write(_CODE_MAGIC)
        fh.write(struct.pack("<III", _CODE_VERSION, n, codes.bits))
        fh.write(struct.pack("<B", 1 if codes.labels is not None else 0))
        fh.write(np.ascontiguousarray(codes.words, dtype="<u8").tobytes())
        if codes.labels is not None:
            fh.write(np.ascontiguousarray(codes.labels, dtype="<i4").tobytes())


def load_codes(path) -> CodeSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CODE_MAGIC:
            raise ValueError("not a code file (bad magic %r)" % magic)
        version, n, bits = struct.unpack("<III", fh.read(12))
        if version != _CODE_VERSION:
            raise ValueError("unsupported code file version %d" % version)
        (has_labels,) = struct.unpack("<B", fh.read(1))
        nw = n_words_for(bits)
        words = np.frombuffer(fh.read(8 * n * nw), dtype="<u8")
        words = words.reshape(n, nw).astype(np.uint64)
        labels = None
        if has_labels:
            labels = np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int32)
    return CodeSet(words=words, bits=bits, labels=labels)
