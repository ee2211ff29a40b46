"""Geometry network: per-object MLP, pairwise relative features, two graph-attention
layers and mean pooling into a room embedding. Forward and backward are written
out by hand in numpy.
"""

from __future__ import annotations

import base64
import json
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..core import FORMAT_VERSION, GEOM_DIM, GeometricFeature, RoomDatabase, sha256_bytes
from ..errors import FormatVersionError, GeometryUnavailable, ParseError, UsageError


@dataclass(frozen=True)
class GeometryConfig:
    embed_dim: int = 256  # E, relative feature size
    hidden_dim: int = 512  # E_h, first graph layer output (heads concatenated)
    out_dim: int = 1024  # E_o, second graph layer output (heads averaged)
    heads: int = 8
    mlp_hidden: int = 64
    in_dim: int = GEOM_DIM
    dropout: float = 0.5
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        for name in ("embed_dim", "hidden_dim", "out_dim", "heads", "mlp_hidden", "in_dim"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        if self.hidden_dim % self.heads:
            raise UsageError("hidden_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h, f1, eo = self.heads, self.head_dim, self.out_dim
        return {
            "mlp.w1": (self.in_dim, self.mlp_hidden),
            "mlp.b1": (self.mlp_hidden,),
            "mlp.w2": (self.mlp_hidden, self.embed_dim),
            "mlp.b2": (self.embed_dim,),
            "gat1.w": (self.embed_dim, h * f1),
            "gat1.att": (h, 2 * f1),
            "gat2.w": (self.hidden_dim, h * eo),
            "gat2.att": (h, 2 * eo),
        }


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass(frozen=True, eq=False)
class GeometryNetParams:
    config: GeometryConfig
    tensors: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        shapes = self.config.shapes()
        if set(self.tensors) != set(shapes):
            raise UsageError(f"tensor names {sorted(self.tensors)} != {sorted(shapes)}")
        frozen = {}
        for name, shape in shapes.items():
            a = np.array(self.tensors[name], dtype=np.float64, copy=True)
            if a.shape != shape:
                raise UsageError(f"{name}: shape {a.shape} != {shape}")
            a.setflags(write=False)
            frozen[name] = a
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @classmethod
    def initialize(cls, config: GeometryConfig | None = None, seed: int = 0) -> GeometryNetParams:
        cfg = config or GeometryConfig()
        rng = np.random.default_rng(seed)
        h, f1, eo = cfg.heads, cfg.head_dim, cfg.out_dim
        t = {
            "mlp.w1": _glorot(rng, (cfg.in_dim, cfg.mlp_hidden), cfg.in_dim, cfg.mlp_hidden),
            "mlp.b1": np.zeros(cfg.mlp_hidden),
            "mlp.w2": _glorot(rng, (cfg.mlp_hidden, cfg.embed_dim), cfg.mlp_hidden, cfg.embed_dim),
            "mlp.b2": np.zeros(cfg.embed_dim),
            "gat1.w": _glorot(rng, (cfg.embed_dim, h * f1), cfg.embed_dim, f1),
            "gat1.att": _glorot(rng, (h, 2 * f1), 2 * f1, 1),
            "gat2.w": _glorot(rng, (cfg.hidden_dim, h * eo), cfg.hidden_dim, eo),
            "gat2.att": _glorot(rng, (h, 2 * eo), 2 * eo, 1),
        }
        return cls(cfg, t)

    def replace(self, tensors: Mapping[str, np.ndarray]) -> GeometryNetParams:
        return GeometryNetParams(self.config, {**self.tensors, **tensors})

    # -- serialization: float64 little-endian, base64, with explicit shapes
    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "tensors": {
                name: {
                    "shape": list(a.shape),
                    "dtype": "float64-le",
                    "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii"),
                }
                for name, a in self.tensors.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> GeometryNetParams:
        if doc.get("version") != FORMAT_VERSION:
            raise FormatVersionError(f"unsupported geometry weights version {doc.get('version')!r}")
        try:
            cfg = GeometryConfig(**doc["config"])
            tensors = {}
            for name, spec in doc["tensors"].items():
                if spec.get("dtype") != "float64-le":
                    raise ParseError(f"{name}: unsupported dtype {spec.get('dtype')!r}")
                raw = np.frombuffer(base64.b64decode(spec["data"]), dtype="<f8")
                tensors[name] = raw.reshape(tuple(spec["shape"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed geometry weights ({exc})") from None
        return cls(cfg, tensors)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> GeometryNetParams:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed geometry weights file ({exc.msg})", exc.lineno) from None
        return cls.from_dict(doc)

    def fingerprint(self) -> str:
        return sha256_bytes(self.dumps().encode())


# ---------------------------------------------------------------------------
# graph attention layer


@dataclass
class _LayerCache:
    x: np.ndarray
    x_mask: np.ndarray | None
    hh: np.ndarray  # (H, n, F')
    z: np.ndarray  # (H, n, F')
    seg: list  # per graph: (start, stop, pre-activation scores, attention, dropped attention mask)


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _gat_layer_forward(
    x: np.ndarray,
    w: np.ndarray,
    att: np.ndarray,
    segments: Sequence[tuple[int, int]],
    slope: float,
    concat: bool,
    dropout: float,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, _LayerCache]:
    """One multi-head attention layer over complete graphs with self-loops.

    ``segments`` lists node ranges of independent graphs stacked in ``x``.
    """
    heads = att.shape[0]
    fo = att.shape[1] // 2
    n = len(x)
    x_mask = None
    if rng is not None and dropout > 0:
        x_mask = _dropout_mask(rng, x.shape, dropout)
        x = x * x_mask
    # head-major (H, n, F') keeps every per-graph block BLAS-friendly
    hh = np.ascontiguousarray((x @ w).reshape(n, heads, fo).transpose(1, 0, 2))
    s_src = np.matmul(hh, att[:, :fo, None])[:, :, 0]  # (H, n)
    s_dst = np.matmul(hh, att[:, fo:, None])[:, :, 0]
    z = np.empty_like(hh)
    seg_cache = []
    for start, stop in segments:
        e = s_src[:, start:stop, None] + s_dst[:, None, start:stop]  # (H, m, m)
        lr = np.where(e > 0, e, slope * e)
        lr -= lr.max(axis=2, keepdims=True)
        a = np.exp(lr)
        a /= a.sum(axis=2, keepdims=True)
        a_mask = None
        p = a
        if rng is not None and dropout > 0:
            a_mask = _dropout_mask(rng, a.shape, dropout)
            p = a * a_mask
        z[:, start:stop] = np.matmul(p, hh[:, start:stop])
        seg_cache.append((start, stop, e, a, a_mask))
    act = np.maximum(z, 0.0)
    if concat:
        out = act.transpose(1, 0, 2).reshape(n, heads * fo)
    else:
        out = act.mean(axis=0)
    return out, _LayerCache(x, x_mask, hh, z, seg_cache)


def _gat_layer_backward(
    dout: np.ndarray,
    w: np.ndarray,
    att: np.ndarray,
    cache: _LayerCache,
    slope: float,
    concat: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d input, d weight, d attention vectors)."""
    hh, z = cache.hh, cache.z
    heads, n, fo = hh.shape
    if concat:
        dact = dout.reshape(n, heads, fo).transpose(1, 0, 2)
    else:
        dact = np.broadcast_to(dout[None] / heads, (heads, n, fo))
    dz = np.ascontiguousarray(dact * (z > 0))
    dhh = np.zeros_like(hh)
    ds_src = np.zeros((heads, n))
    ds_dst = np.zeros((heads, n))
    for start, stop, e, a, a_mask in cache.seg:
        dzs = dz[:, start:stop]  # (H, m, F')
        hs = hh[:, start:stop]
        p = a if a_mask is None else a * a_mask
        dp = np.matmul(dzs, hs.transpose(0, 2, 1))  # (H, m, m)
        dhh[:, start:stop] += np.matmul(np.ascontiguousarray(p.transpose(0, 2, 1)), dzs)
        da = dp if a_mask is None else dp * a_mask
        dl = a * (da - np.sum(da * a, axis=2, keepdims=True))
        de = dl * np.where(e > 0, 1.0, slope)
        ds_src[:, start:stop] = de.sum(axis=2)
        ds_dst[:, start:stop] = de.sum(axis=1)
    a_src, a_dst = att[:, :fo], att[:, fo:]
    dhh += ds_src[:, :, None] * a_src[:, None, :] + ds_dst[:, :, None] * a_dst[:, None, :]
    datt = np.concatenate(
        [np.matmul(ds_src[:, None, :], hh)[:, 0], np.matmul(ds_dst[:, None, :], hh)[:, 0]], axis=1
    )
    dhh_flat = dhh.transpose(1, 0, 2).reshape(n, heads * fo)
    dw = cache.x.T @ dhh_flat
    dx = dhh_flat @ w.T
    if cache.x_mask is not None:
        dx *= cache.x_mask
    return dx, dw, datt


# ---------------------------------------------------------------------------
# whole network


def _pair_index(z: int) -> tuple[np.ndarray, np.ndarray]:
    j, k = np.triu_indices(z, k=1)
    return j, k


def _as_feature_matrix(geoms) -> np.ndarray:
    """Canonical (Z, in_dim) matrix: mappings are ordered by object id."""
    if isinstance(geoms, np.ndarray):
        return np.atleast_2d(np.asarray(geoms, dtype=np.float64))
    if isinstance(geoms, Mapping):
        geoms = [geoms[k] for k in sorted(geoms)]
    rows = [g.values if isinstance(g, GeometricFeature) else np.asarray(g) for g in geoms]
    if not rows:
        return np.zeros((0, GEOM_DIM))
    return np.stack(rows).astype(np.float64)


@dataclass
class ForwardCache:
    obj: np.ndarray
    h1_pre: np.ndarray
    h1: np.ndarray
    pair_j: np.ndarray
    pair_k: np.ndarray
    node_segments: list
    layer1: _LayerCache
    layer2: _LayerCache
    out1: np.ndarray
    out2: np.ndarray


def forward(
    params: GeometryNetParams,
    graphs: Sequence[np.ndarray],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Room embeddings for a batch of rooms, each given as a (Z, in_dim) feature matrix.

    With ``training`` set, dropout masks are drawn from ``rng``.
    """
    cfg = params.config
    t = params.tensors
    if training and cfg.dropout > 0 and rng is None:
        raise UsageError("training mode with dropout needs an rng")
    obj_offsets, pj, pk, segments = [], [], [], []
    n_obj = n_node = 0
    for g in graphs:
        z = len(g)
        if z < 2:
            raise GeometryUnavailable(f"room geometry needs >= 2 objects, got {z}")
        j, k = _pair_index(z)
        pj.append(j + n_obj)
        pk.append(k + n_obj)
        segments.append((n_node, n_node + len(j)))
        obj_offsets.append(n_obj)
        n_obj += z
        n_node += len(j)
    obj = np.concatenate(graphs, axis=0)
    if obj.shape[1] != cfg.in_dim:
        raise UsageError(f"feature dimension {obj.shape[1]} != {cfg.in_dim}")
    pair_j, pair_k = np.concatenate(pj), np.concatenate(pk)

    h1_pre = obj @ t["mlp.w1"] + t["mlp.b1"]
    h1 = np.maximum(h1_pre, 0.0)
    g_out = h1 @ t["mlp.w2"] + t["mlp.b2"]
    x0 = g_out[pair_j] - g_out[pair_k]

    layer_rng = rng if training else None
    out1, c1 = _gat_layer_forward(
        x0, t["gat1.w"], t["gat1.att"], segments, cfg.leaky_slope, True, cfg.dropout, layer_rng
    )
    out2, c2 = _gat_layer_forward(
        out1, t["gat2.w"], t["gat2.att"], segments, cfg.leaky_slope, False, cfg.dropout, layer_rng
    )
    rooms = np.stack([out2[a:b].mean(axis=0) for a, b in segments])
    cache = ForwardCache(obj, h1_pre, h1, pair_j, pair_k, segments, c1, c2, out1, out2)
    return rooms, cache


def backward(
    params: GeometryNetParams, cache: ForwardCache, d_rooms: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every tensor, given d loss / d room embeddings."""
    cfg = params.config
    t = params.tensors
    d_out2 = np.empty_like(cache.out2)
    for (a, b), dr in zip(cache.node_segments, d_rooms):
        d_out2[a:b] = dr / (b - a)
    d_out1, d_w2, d_att2 = _gat_layer_backward(
        d_out2, t["gat2.w"], t["gat2.att"], cache.layer2, cfg.leaky_slope, False
    )
    d_x0, d_w1, d_att1 = _gat_layer_backward(
        d_out1, t["gat1.w"], t["gat1.att"], cache.layer1, cfg.leaky_slope, True
    )
    d_g = np.zeros((len(cache.obj), cfg.embed_dim))
    np.add.at(d_g, cache.pair_j, d_x0)
    np.subtract.at(d_g, cache.pair_k, d_x0)
    d_mw2 = cache.h1.T @ d_g
    d_mb2 = d_g.sum(axis=0)
    d_h1 = (d_g @ t["mlp.w2"].T) * (cache.h1_pre > 0)
    d_mw1 = cache.obj.T @ d_h1
    d_mb1 = d_h1.sum(axis=0)
    return {
        "mlp.w1": d_mw1,
        "mlp.b1": d_mb1,
        "mlp.w2": d_mw2,
        "mlp.b2": d_mb2,
        "gat1.w": d_w1,
        "gat1.att": d_att1,
        "gat2.w": d_w2,
        "gat2.att": d_att2,
    }


# ---------------------------------------------------------------------------
# inference-facing operations


def relative_features(geoms, params: GeometryNetParams) -> np.ndarray:
    """g(o_j) - g(o_k) for every pair j < k in canonical order; shape (Z(Z-1)/2, E)."""
    obj = _as_feature_matrix(geoms)
    if len(obj) < 2:
        raise GeometryUnavailable(f"need >= 2 objects for relative features, got {len(obj)}")
    t = params.tensors
    g = np.maximum(obj @ t["mlp.w1"] + t["mlp.b1"], 0.0) @ t["mlp.w2"] + t["mlp.b2"]
    j, k = _pair_index(len(obj))
    return g[j] - g[k]


def gat_forward(
    nodes: np.ndarray,
    params: GeometryNetParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_attention: bool = False,
):
    """Both attention layers over one complete graph of relative features."""
    cfg = params.config
    t = params.tensors
    x = np.atleast_2d(np.asarray(nodes, dtype=np.float64))
    if len(x) < 1:
        raise UsageError("gat_forward needs at least one node")
    if training and cfg.dropout > 0 and rng is None:
        raise UsageError("training mode with dropout needs an rng")
    seg = [(0, len(x))]
    layer_rng = rng if training else None
    out1, c1 = _gat_layer_forward(
        x, t["gat1.w"], t["gat1.att"], seg, cfg.leaky_slope, True, cfg.dropout, layer_rng
    )
    out2, c2 = _gat_layer_forward(
        out1, t["gat2.w"], t["gat2.att"], seg, cfg.leaky_slope, False, cfg.dropout, layer_rng
    )
    if return_attention:
        return out2, (c1.seg[0][3], c2.seg[0][3])
    return out2


def room_geom_embedding(geoms, params: GeometryNetParams) -> np.ndarray:
    """Mean of the node outputs for one room (inference mode); length E_o."""
    obj = _as_feature_matrix(geoms)
    if len(obj) < 2:
        raise GeometryUnavailable(f"room geometry needs >= 2 objects, got {len(obj)}")
    rooms, _ = forward(params, [obj], training=False)
    return rooms[0]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def geometry_scores(db: RoomDatabase, query_geoms, params: GeometryNetParams) -> dict[str, float]:
    """Cosine between the query room embedding and each stored room embedding."""
    r_q = room_geom_embedding(query_geoms, params)
    return scores_from_embedding(db, r_q)


def scores_from_embedding(db: RoomDatabase, r_q: np.ndarray) -> dict[str, float]:
    return {
        r.room_id: 0.0 if r.geom_embedding is None else cosine(r.geom_embedding, r_q)
        for r in db.rooms
    }
