"""Fixed per-item embedding vectors, loaded from a file or derived from history.

Embedding file format: first line ``dim=<d>``, then one item per line,
``item_id<TAB>f1<TAB>...<TAB>fd``.  The fallback derives item vectors from a
truncated SVD of the idf-weighted history matrix with items as rows, so items
with similar reader sets get similar vectors; items unseen in history are
flagged uncovered and excluded from sampling pools downstream.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics
from .corpus import EventStream, interaction_matrix


@dataclass
class EmbeddingTable:
    dim: int
    vectors: np.ndarray   # J x dim float64
    covered: np.ndarray   # J bools

    def __post_init__(self):
        if self.vectors.shape != (len(self.covered), self.dim):
            raise ValueError("vectors shape inconsistent with dim/coverage")
        if not np.all(np.isfinite(self.vectors[self.covered])):
            raise ValueError("covered rows must be finite")

    @property
    def n_items(self) -> int:
        return len(self.covered)

    @property
    def coverage(self) -> float:
        return float(np.mean(self.covered)) if len(self.covered) else 0.0


def load_embeddings(path, item_index: dict) -> EmbeddingTable:
    """Parse an embedding file against the corpus item index.

    Items in the corpus but absent from the file stay uncovered; items in the
    file but not in the corpus are ignored.  A duplicated item id keeps its
    last occurrence and emits a warning.
    """
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("dim="):
            raise ValueError(f"embedding file must start with 'dim=<d>', got {header!r}")
        dim = int(header[4:])
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        vectors = np.zeros((len(item_index), dim))
        covered = np.zeros(len(item_index), dtype=bool)
        seen: set[str] = set()
        for lineno, line in enumerate(f, start=2):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != dim + 1:
                raise ValueError(f"line {lineno}: expected {dim + 1} fields, got {len(parts)}")
            item_id = parts[0]
            if item_id in seen:
                warnings.warn(f"duplicate embedding for item {item_id!r}; last occurrence wins")
            seen.add(item_id)
            j = item_index.get(item_id)
            if j is None:
                continue
            vectors[j] = [float(x) for x in parts[1:]]
            covered[j] = True
    return EmbeddingTable(dim=dim, vectors=vectors, covered=covered)


def save_embeddings(table: EmbeddingTable, item_ids, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"dim={table.dim}\n")
        for j, item_id in enumerate(item_ids):
            if not table.covered[j]:
                continue
            vals = "\t".join(repr(float(x)) for x in table.vectors[j])
            f.write(f"{item_id}\t{vals}\n")


def fallback_embeddings(history: EventStream, dim: int, seed: int) -> EmbeddingTable:
    """Item vectors from the idf-weighted history matrix, items as rows.

    Row j of the result is (left factor row j) * sqrt(sigma) of the rank-`dim`
    SVD of tfidf(R)^T, giving co-readership geometry without any text input.
    """
    R = interaction_matrix(history)
    if len(history) == 0:
        raise ValueError("history stream is empty")
    if not (1 <= dim <= min(R.rows, R.cols)):
        raise ValueError(f"dim={dim} out of range for {R.rows} users x {R.cols} items")
    M = numerics.tfidf(R).T.tocsr()  # items x users
    factors = numerics.truncated_svd(M, dim, seed, keep_v=False)
    vectors = factors.U * np.sqrt(factors.sigma)[np.newaxis, :]
    covered = np.asarray(M.getnnz(axis=1) > 0)
    vectors[~covered] = 0.0
    return EmbeddingTable(dim=dim, vectors=vectors, covered=covered)
