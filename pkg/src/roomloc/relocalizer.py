"""Database construction and the query path with appearance-gated geometry ensembling."""

from __future__ import annotations

import json
import math
import time
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .appearance import VladParams, encode_object, score_all_rooms
from .core import (
    GeometricFeature,
    ObjectEmbedding,
    ObjectObservation,
    RoomDatabase,
    RoomObject,
    RoomRecord,
    merge_embeddings,
    merge_geometric,
    sha256_bytes,
)
from .errors import DatabaseError, GeometryUnavailable, UsageError
from .geometry import GeometryNetParams, geometric_feature, room_geom_embedding, scores_from_embedding


@dataclass(frozen=True)
class RelocConfig:
    w: float = 10.0
    t_diff: float = 0.1
    K: int = 1

    def __post_init__(self) -> None:
        if self.w < 0:
            raise UsageError("w must be >= 0")
        if not 0.0 <= self.t_diff <= 1.0:
            raise UsageError("t_diff must be in [0, 1]")
        if self.K < 1:
            raise UsageError("K must be >= 1")


@dataclass(frozen=True)
class RelocResult:
    ranked: list[tuple[str, float]]
    used_geometry: bool
    appearance_scores: dict[str, float]
    geometry_scores: dict[str, float] | None = None

    @property
    def top(self) -> str | None:
        return self.ranked[0][0] if self.ranked else None

    def to_record(self) -> str:
        def num(x: float):
            return x if math.isfinite(x) else None

        return json.dumps(
            {
                "ranked": [[r, s] for r, s in self.ranked],
                "used_geometry": self.used_geometry,
                "appearance": {k: num(v) for k, v in self.appearance_scores.items()},
                "geometry": self.geometry_scores,
            },
            separators=(",", ":"),
        )


@dataclass
class StageTimes:
    """Wall-clock seconds of one query, split by pipeline stage."""

    encode: float = 0.0
    appearance: float = 0.0
    geometry: float = 0.0
    overall: float = 0.0


def select_images(image_ids: Sequence[str], K: int, seed: int) -> list[str]:
    """Uniform-stride choice of K images from the id-sorted list; the seed sets the phase."""
    ids = sorted(image_ids)
    n = len(ids)
    if K > n:
        raise UsageError(f"cannot select {K} images from {n}")
    stride = n / K
    phase = np.random.default_rng(seed).random() * stride
    picks = [int(math.floor(phase + i * stride)) for i in range(K)]
    return [ids[min(p, n - 1)] for p in picks]


def params_fingerprint(vlad: VladParams, geom: GeometryNetParams | None) -> str:
    parts = [vlad.fingerprint(), geom.fingerprint() if geom is not None else "no-geometry"]
    return sha256_bytes("\n".join(parts).encode())


def _merge_objects(
    observations: Iterable[ObjectObservation], vlad: VladParams
) -> dict[str, tuple[ObjectEmbedding, GeometricFeature, int]]:
    embs: dict[str, list[ObjectEmbedding]] = defaultdict(list)
    geoms: dict[str, list[GeometricFeature]] = defaultdict(list)
    for o in observations:
        embs[o.object_id].append(encode_object(o.keypoints, vlad))
        geoms[o.object_id].append(geometric_feature(o.keypoints))
    return {
        oid: (merge_embeddings(embs[oid]), merge_geometric(geoms[oid]), len(embs[oid]))
        for oid in sorted(embs)
    }


def build_database(
    observations: Sequence[ObjectObservation],
    K: int,
    vlad: VladParams,
    geom: GeometryNetParams | None,
    seed: int = 0,
) -> RoomDatabase:
    """Encode K images per room and merge each object's codes across them."""
    if K < 1:
        raise UsageError("K must be >= 1")
    by_room: dict[str, dict[str, list[ObjectObservation]]] = defaultdict(lambda: defaultdict(list))
    scenes = set()
    for o in observations:
        by_room[o.room_id][o.image_id].append(o)
        scenes.add(o.scene_id)
    if len(scenes) > 1:
        raise DatabaseError(f"observations span several scenes: {sorted(scenes)}")

    rooms = []
    for room_id in sorted(by_room):
        images = by_room[room_id]
        if len(images) < K:
            raise DatabaseError(f"room {room_id!r} has {len(images)} images, fewer than K={K}")
        chosen = select_images(list(images), K, seed)
        merged = _merge_objects((o for iid in chosen for o in images[iid]), vlad)
        objects = {oid: RoomObject(e, g, n) for oid, (e, g, n) in merged.items()}
        r_geom = None
        if geom is not None and len(objects) >= 2:
            r_geom = room_geom_embedding({oid: o.geom for oid, o in objects.items()}, geom)
        rooms.append(RoomRecord(room_id, objects, r_geom))
    scene = scenes.pop() if scenes else ""
    return RoomDatabase(scene, K, tuple(rooms), params_fingerprint(vlad, geom))


def ensemble(appearance: Mapping[str, float], geometry: Mapping[str, float], w: float) -> dict[str, float]:
    """w * appearance + geometry, per room."""
    if set(appearance) != set(geometry):
        raise UsageError("appearance and geometry scores cover different rooms")
    return {k: w * appearance[k] + geometry[k] for k in appearance}


def appearance_gap(appearance: Mapping[str, float], z: int) -> float:
    """Top-1 minus top-2 of the appearance scores divided by Z and clipped to [0, 1]."""
    norm = sorted((min(max(v / z, 0.0), 1.0) for v in appearance.values()), reverse=True)
    if len(norm) < 2:
        raise UsageError("the appearance gap needs at least two rooms")
    return norm[0] - norm[1]


def _rank(scores: Mapping[str, float]) -> list[tuple[str, float]]:
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def relocalize(
    query: Sequence[ObjectObservation],
    db: RoomDatabase,
    vlad: VladParams,
    geom: GeometryNetParams | None,
    cfg: RelocConfig = RelocConfig(),
    times: StageTimes | None = None,
) -> RelocResult:
    """Rank database rooms for a query of one or two images.

    Geometry is consulted only when the gap between the best and second-best
    appearance score, each divided by the number of query objects and clipped
    to [0, 1], is below ``cfg.t_diff``.
    """
    if len(query) == 0:
        raise UsageError("empty query")
    t_start = time.perf_counter()
    merged = _merge_objects(query, vlad)
    q_emb = np.stack([e.code for e, _, _ in merged.values()])
    q_geom = {oid: g for oid, (_, g, _) in merged.items()}
    z = len(merged)
    t_enc = time.perf_counter()

    app_all = score_all_rooms(db, q_emb)
    app = {k: v for k, v in app_all.items() if math.isfinite(v)}
    t_app = time.perf_counter()

    final: dict[str, float] = app
    geo_scores = None
    used = False
    if len(app) >= 2 and geom is not None and z >= 2:
        if appearance_gap(app, z) < cfg.t_diff:
            try:
                r_q = room_geom_embedding(q_geom, geom)
            except GeometryUnavailable:
                r_q = None
            if r_q is not None:
                geo_all = scores_from_embedding(db, r_q)
                geo_scores = {k: geo_all[k] for k in app}
                final = ensemble(app, geo_scores, cfg.w)
                used = True
    t_geo = time.perf_counter()

    result = RelocResult(_rank(final), used, app_all, geo_scores)
    if times is not None:
        times.encode = t_enc - t_start
        times.appearance = t_app - t_enc
        times.geometry = t_geo - t_app if used else 0.0
        times.overall = time.perf_counter() - t_start
    return result
