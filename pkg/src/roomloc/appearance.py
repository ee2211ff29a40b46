"""Object appearance codes and appearance-based room scoring.

Objects are encoded by soft-assigned residual aggregation of their keypoint
descriptors against C cluster centers, then matched exhaustively by cosine
similarity. A room's score for a query is the sum, over query objects, of the
best match among that room's objects.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FORMAT_VERSION, KeypointSet, ObjectEmbedding, RoomDatabase, _frozen, sha256_bytes
from .errors import FormatVersionError, ParseError, UsageError

N_CLUSTERS = 32
# sharpness of the seeded assignment: w_c = 2*alpha*x_c, b_c = -alpha*|x_c|^2
SEED_ALPHA = 10.0
ROW_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class VladParams:
    centers: np.ndarray  # (C, D_p)
    assign_weights: np.ndarray  # (C, D_p)
    assign_bias: np.ndarray  # (C,)

    def __post_init__(self) -> None:
        c = np.asarray(self.centers, dtype=np.float64)
        w = np.asarray(self.assign_weights, dtype=np.float64)
        b = np.asarray(self.assign_bias, dtype=np.float64).reshape(-1)
        if c.ndim != 2 or c.shape[0] < 1:
            raise UsageError("centers must be a non-empty (C, D_p) matrix")
        if w.shape != c.shape or b.shape != (c.shape[0],):
            raise UsageError(
                f"inconsistent shapes: centers {c.shape}, weights {w.shape}, bias {b.shape}"
            )
        object.__setattr__(self, "centers", _frozen(c))
        object.__setattr__(self, "assign_weights", _frozen(w))
        object.__setattr__(self, "assign_bias", _frozen(b))

    @property
    def C(self) -> int:
        return self.centers.shape[0]

    @property
    def Dp(self) -> int:
        return self.centers.shape[1]

    @property
    def code_dim(self) -> int:
        return self.C * self.Dp

    @classmethod
    def seeded(cls, seed: int = 0, C: int = N_CLUSTERS, Dp: int = 256, alpha: float = SEED_ALPHA):
        """Deterministic parameters: unit-vector centers, assignment sharpened around them."""
        rng = np.random.default_rng(seed)
        centers = rng.standard_normal((C, Dp))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        weights = 2.0 * alpha * centers
        bias = -alpha * np.sum(centers**2, axis=1)
        return cls(centers, weights, bias)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "C": self.C,
            "Dp": self.Dp,
            "centers": self.centers.tolist(),
            "weights": self.assign_weights.tolist(),
            "bias": self.assign_bias.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> VladParams:
        if doc.get("version") != FORMAT_VERSION:
            raise FormatVersionError(f"unsupported weights version {doc.get('version')!r}")
        try:
            p = cls(doc["centers"], doc["weights"], doc["bias"])
        except KeyError as exc:
            raise ParseError(f"weights file missing {exc}") from None
        if (p.C, p.Dp) != (doc.get("C"), doc.get("Dp")):
            raise ParseError(f"shape header C={doc.get('C')} Dp={doc.get('Dp')} disagrees with data")
        return p

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> VladParams:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed weights file ({exc.msg})", exc.lineno) from None
        return cls.from_dict(doc)

    def fingerprint(self) -> str:
        return sha256_bytes(self.dumps().encode())


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def soft_assign(d: np.ndarray, params: VladParams) -> np.ndarray:
    """Softmax over per-cluster affine scores; works on one descriptor or a stack."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != params.Dp:
        raise UsageError(f"descriptor dimension {d.shape[-1]} != {params.Dp}")
    return _softmax_rows(d @ params.assign_weights.T + params.assign_bias)


def vlad_encode(descriptors: np.ndarray, params: VladParams) -> np.ndarray:
    """Residual aggregation of raw descriptors (rows are L2-normalized first)."""
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != params.Dp:
        raise UsageError(f"expected (N, {params.Dp}) descriptors, got {d.shape}")
    n = np.linalg.norm(d, axis=1, keepdims=True)
    d = np.divide(d, n, out=np.zeros_like(d), where=n > 0)
    a = soft_assign(d, params)  # (N, C)
    # sum_i a_ic (d_i - x_c) = (A^T D)_c - (sum_i a_ic) x_c
    v = a.T @ d - a.sum(axis=0)[:, None] * params.centers
    rn = np.linalg.norm(v, axis=1, keepdims=True)
    v = np.divide(v, rn, out=np.zeros_like(v), where=rn >= ROW_EPS)
    v = v.reshape(-1)
    g = np.linalg.norm(v)
    if g > 0:
        v /= g
    return v


def encode_object(kps: KeypointSet, params: VladParams) -> ObjectEmbedding:
    return ObjectEmbedding(vlad_encode(kps.descriptors, params))


def _as_matrix(embs: Sequence[ObjectEmbedding] | np.ndarray) -> np.ndarray:
    if isinstance(embs, np.ndarray):
        return np.atleast_2d(embs)
    return np.stack([e.code for e in embs])


def _unit_rows(m: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, n, out=np.zeros_like(m, dtype=np.float64), where=n > 0)


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Cosine similarities; rows are database objects, columns query objects."""

    values: np.ndarray
    row_ids: tuple[str, ...] = ()
    col_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        v = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "values", _frozen(v))


def object_similarity(
    db: Sequence[ObjectEmbedding],
    query: Sequence[ObjectEmbedding],
    row_ids: Sequence[str] = (),
    col_ids: Sequence[str] = (),
) -> SimilarityMatrix:
    if len(db) == 0 or len(query) == 0:
        raise UsageError("object_similarity needs non-empty database and query")
    d, q = _as_matrix(db), _as_matrix(query)
    if d.shape[1] != q.shape[1]:
        raise UsageError(f"embedding dimensions differ: {d.shape[1]} vs {q.shape[1]}")
    s = np.clip(_unit_rows(d) @ _unit_rows(q).T, -1.0, 1.0)
    return SimilarityMatrix(s, tuple(row_ids), tuple(col_ids))


def room_appearance_score(S: SimilarityMatrix | np.ndarray) -> float:
    values = S.values if isinstance(S, SimilarityMatrix) else np.atleast_2d(S)
    if values.size == 0:
        raise UsageError("empty similarity matrix")
    return float(values.max(axis=0).sum())


def score_all_rooms(
    db: RoomDatabase, query_objects: Sequence[ObjectEmbedding] | np.ndarray
) -> dict[str, float]:
    """Appearance score for every room; rooms without objects get -inf."""
    if len(db.rooms) == 0:
        raise UsageError("empty database")
    q = _as_matrix(query_objects) if len(query_objects) else np.zeros((0, 0))
    if q.shape[0] == 0:
        raise UsageError("query has no objects")
    matrix, starts, owners = db.object_matrix
    scores = {r.room_id: float("-inf") for r in db.rooms}
    if not owners:
        return scores
    if q.shape[1] != matrix.shape[1]:
        raise UsageError(f"query dimension {q.shape[1]} != database {matrix.shape[1]}")
    sim = (matrix @ _unit_rows(q).T.astype(np.float32)).astype(np.float64)  # (N_db, Z)
    np.clip(sim, -1.0, 1.0, out=sim)
    best = np.maximum.reduceat(sim, starts, axis=0)  # (rooms, Z)
    totals = best.sum(axis=1)
    for owner, total in zip(owners, totals):
        scores[db.rooms[owner].room_id] = float(total)
    return scores
