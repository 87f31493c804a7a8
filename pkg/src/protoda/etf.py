"""Fixed simplex-ETF prototype bank.

A bank holds K = 2C+1 unit vectors in R^d (d >= K): one source and one
target prototype per class, plus a single target-side "unknown" prototype.
The vectors form a simplex equiangular tight frame, so every pair of
distinct prototypes has inner product -1/(2C) and the set sums to zero.
The frame orientation is fixed by a seeded orthonormal basis; nothing in
the bank is learnable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)


class DimensionError(ValueError):
    """Embedding dimension too small to hold the requested frame."""


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    """Immutable set of 2C+1 ETF prototypes plus the (class, domain) index map.

    Prototype indices are 1-based: 1..C are source prototypes, C+1..2C are
    target prototypes, 2C+1 is the target unknown prototype. ``prototypes``
    stores index k in row k-1.
    """

    num_classes: int
    embed_dim: int
    seed: int
    prototypes: np.ndarray  # (K, d) float64, rows are unit vectors
    index_map: dict[tuple[int, str], int] = field(repr=False)

    @property
    def num_prototypes(self) -> int:
        return 2 * self.num_classes + 1

    @property
    def unknown_class(self) -> int:
        return self.num_classes + 1

    @property
    def source_matrix(self) -> np.ndarray:
        """(C, d) rows: source prototype of class c at row c-1."""
        return self.prototypes[: self.num_classes]

    @property
    def target_matrix(self) -> np.ndarray:
        """(C+1, d) rows: target prototype of class c at row c-1, unknown last."""
        return self.prototypes[self.num_classes :]

    def gram(self) -> np.ndarray:
        return self.prototypes @ self.prototypes.T

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "embed_dim": self.embed_dim,
            "seed": self.seed,
            "prototypes": self.prototypes.ravel().tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PrototypeBank":
        c = int(doc["num_classes"])
        d = int(doc["embed_dim"])
        protos = np.asarray(doc["prototypes"], dtype=np.float64).reshape(2 * c + 1, d)
        protos.flags.writeable = False
        return cls(
            num_classes=c,
            embed_dim=d,
            seed=int(doc["seed"]),
            prototypes=protos,
            index_map=_make_index_map(c),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "PrototypeBank":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _make_index_map(num_classes: int) -> dict[tuple[int, str], int]:
    idx = {}
    for c in range(1, num_classes + 1):
        idx[(c, SOURCE)] = c
        idx[(c, TARGET)] = num_classes + c
    idx[(num_classes + 1, TARGET)] = 2 * num_classes + 1
    return idx


def build_etf(num_classes: int, embed_dim: int, seed: int) -> PrototypeBank:
    """Construct the fixed prototype bank for ``num_classes`` source classes.

    The K = 2C+1 prototypes are sqrt(K/(K-1)) * U (I_K - (1/K) 1 1^T) where U
    is a seeded (embed_dim x K) matrix with orthonormal columns. Any such U
    yields unit-norm prototypes with pairwise inner product -1/(K-1) = -1/(2C)
    that sum to zero; the seed only rotates the frame.

    Raises DimensionError when embed_dim < 2*num_classes + 1 and ValueError
    when num_classes < 1.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    k = 2 * num_classes + 1
    if embed_dim < k:
        raise DimensionError(
            f"embed_dim must be >= 2*num_classes+1 = {k}, got {embed_dim}"
        )

    rng = np.random.default_rng(seed)
    gauss = rng.normal(size=(embed_dim, k))
    q, r = np.linalg.qr(gauss)
    # canonical sign so the frame is a pure function of the seed
    q = q * np.sign(np.diagonal(r))

    centering = np.eye(k) - np.full((k, k), 1.0 / k)
    protos = (np.sqrt(k / (k - 1.0)) * (q @ centering)).T  # (K, d)
    protos = np.ascontiguousarray(protos, dtype=np.float64)
    protos.flags.writeable = False

    return PrototypeBank(
        num_classes=num_classes,
        embed_dim=embed_dim,
        seed=seed,
        prototypes=protos,
        index_map=_make_index_map(num_classes),
    )


def prototype_of(bank: PrototypeBank, class_id: int, domain: str) -> np.ndarray:
    """Look up the prototype for (class_id, domain).

    Source lookups accept classes 1..C; target lookups additionally accept
    C+1 (the unknown class). Anything else raises KeyError.
    """
    if domain not in DOMAINS:
        raise KeyError(f"unknown domain {domain!r}")
    key = (int(class_id), domain)
    if key not in bank.index_map:
        raise KeyError(
            f"no prototype for class {class_id} in domain {domain!r} "
            f"(C={bank.num_classes})"
        )
    return bank.prototypes[bank.index_map[key] - 1]


def cosine_pair(
    bank: PrototypeBank, embedding: np.ndarray, class_id: int
) -> tuple[float, float]:
    """Cosine similarity of ``embedding`` against class_id's source and target prototypes.

    The embedding is L2-normalized here; a zero vector is rejected.
    """
    if not 1 <= class_id <= bank.num_classes:
        raise KeyError(f"class {class_id} out of range 1..{bank.num_classes}")
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape != (bank.embed_dim,):
        raise ValueError(f"embedding shape {emb.shape} != ({bank.embed_dim},)")
    norm = np.linalg.norm(emb)
    if norm == 0.0:
        raise ValueError("cannot take cosine of a zero embedding")
    unit = emb / norm
    d_s = float(unit @ prototype_of(bank, class_id, SOURCE))
    d_t = float(unit @ prototype_of(bank, class_id, TARGET))
    # prototypes are unit vectors, so only rounding can spill past [-1, 1]
    return min(max(d_s, -1.0), 1.0), min(max(d_t, -1.0), 1.0)
