"""Seeded synthetic scenes: rooms of abstract object identities observed from many views.

Each identity has a base unit descriptor and each room slot a 2-D anchor plus a
keypoint pattern. Every image perturbs keypoint positions (one shared viewpoint
shift plus per-point jitter) and descriptors (isotropic Gaussian noise, then
renormalized). Twin rooms reuse another room's identities with x-mirrored
layouts, so only geometry separates them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import KeypointSet, ObjectObservation
from .errors import UsageError


@dataclass(frozen=True)
class WorldSpec:
    n_rooms: int = 20
    objects_per_room: tuple[int, int] = (5, 10)
    images_per_room: int = 20
    keypoints_per_object: tuple[int, int] = (8, 16)
    descriptor_noise_sigma: float = 0.2
    layout_jitter_sigma: float = 0.02
    twin_room_pairs: int = 0
    seed: int = 0
    descriptor_dim: int = 256
    scene_id: str = "synth"

    def __post_init__(self) -> None:
        lo, hi = self.objects_per_room
        klo, khi = self.keypoints_per_object
        if min(self.n_rooms, self.images_per_room, self.descriptor_dim, lo, klo) < 1:
            raise UsageError("all counts must be >= 1")
        if hi < lo or khi < klo:
            raise UsageError("(min, max) ranges must satisfy min <= max")
        if self.descriptor_noise_sigma < 0 or self.layout_jitter_sigma < 0:
            raise UsageError("noise sigmas must be >= 0")
        if self.twin_room_pairs < 0 or 2 * self.twin_room_pairs > self.n_rooms:
            raise UsageError("twin_room_pairs must fit in n_rooms")


@dataclass(frozen=True, eq=False)
class RoomTruth:
    room_id: str
    identities: tuple[int, ...]  # identity per object slot
    anchors: np.ndarray  # (Z, 2)
    twin_of: str | None = None


@dataclass(frozen=True, eq=False)
class World:
    spec: WorldSpec
    observations: list[ObjectObservation]
    labels: dict[str, str]  # image_id -> room_id
    rooms: list[RoomTruth] = field(default_factory=list)

    def twin_rooms(self) -> set[str]:
        out = set()
        for r in self.rooms:
            if r.twin_of is not None:
                out.update((r.room_id, r.twin_of))
        return out


@dataclass(frozen=True)
class _Layout:
    identities: tuple[int, ...]
    base_desc: np.ndarray  # (Z, D)
    anchors: np.ndarray  # (Z, 2)
    patterns: tuple[np.ndarray, ...]  # per slot (n_kp, 2) offsets

    def mirrored(self) -> _Layout:
        anchors = self.anchors.copy()
        anchors[:, 0] = 1.0 - anchors[:, 0]
        flip = np.array([-1.0, 1.0])
        return _Layout(self.identities, self.base_desc, anchors, tuple(p * flip for p in self.patterns))


def _unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _draw_layout(rng: np.random.Generator, spec: WorldSpec, first_identity: int) -> _Layout:
    z = int(rng.integers(spec.objects_per_room[0], spec.objects_per_room[1] + 1))
    anchors = rng.uniform(0.15, 0.85, size=(z, 2))
    patterns = []
    for _ in range(z):
        n_kp = int(rng.integers(spec.keypoints_per_object[0], spec.keypoints_per_object[1] + 1))
        extent = rng.uniform(0.02, 0.08, size=2)
        patterns.append(rng.standard_normal((n_kp, 2)) * extent)
    return _Layout(
        tuple(range(first_identity, first_identity + z)),
        _unit(rng, z, spec.descriptor_dim),
        anchors,
        tuple(patterns),
    )


def _render_room(
    rng: np.random.Generator, spec: WorldSpec, room_id: str, layout: _Layout
) -> list[ObjectObservation]:
    out = []
    sigma = spec.descriptor_noise_sigma
    jitter = spec.layout_jitter_sigma
    d = spec.descriptor_dim
    for i in range(spec.images_per_room):
        image_id = f"{room_id}-img{i:03d}"
        shift = rng.standard_normal(2) * jitter
        for slot, pattern in enumerate(layout.patterns):
            n_kp = len(pattern)
            pts = layout.anchors[slot] + pattern + shift + rng.standard_normal((n_kp, 2)) * jitter
            pts = np.clip(pts, 0.0, 1.0)
            base = np.broadcast_to(layout.base_desc[slot], (n_kp, d))
            if sigma > 0:
                desc = base + rng.standard_normal((n_kp, d)) * (sigma / np.sqrt(d))
                desc /= np.linalg.norm(desc, axis=1, keepdims=True)
            else:
                desc = np.array(base)
            out.append(
                ObjectObservation(
                    spec.scene_id, room_id, image_id, f"{room_id}-o{slot:02d}", KeypointSet(pts, desc)
                )
            )
    return out


def generate_world(spec: WorldSpec) -> World:
    """Deterministic per seed; each room renders from its own seed substream."""
    root = np.random.SeedSequence(spec.seed)
    layout_rng = np.random.default_rng(root.spawn(1)[0])
    room_seeds = root.spawn(spec.n_rooms)

    room_ids = [f"room{r:03d}" for r in range(spec.n_rooms)]
    layouts: list[_Layout] = []
    twin_of: list[str | None] = []
    next_identity = 0
    for r in range(spec.n_rooms):
        # rooms 2i+1 (i < twin_room_pairs) mirror room 2i
        if r % 2 == 1 and r < 2 * spec.twin_room_pairs:
            layouts.append(layouts[r - 1].mirrored())
            twin_of.append(room_ids[r - 1])
            continue
        lay = _draw_layout(layout_rng, spec, next_identity)
        next_identity += len(lay.identities)
        layouts.append(lay)
        twin_of.append(None)

    observations: list[ObjectObservation] = []
    labels: dict[str, str] = {}
    truths = []
    for r, room_id in enumerate(room_ids):
        obs = _render_room(np.random.default_rng(room_seeds[r]), spec, room_id, layouts[r])
        observations.extend(obs)
        for o in obs:
            labels[o.image_id] = room_id
        anchors = layouts[r].anchors.copy()
        anchors.setflags(write=False)
        truths.append(RoomTruth(room_id, layouts[r].identities, anchors, twin_of[r]))
    return World(spec, observations, labels, truths)


@dataclass(frozen=True)
class Query:
    image_ids: tuple[str, ...]
    true_room: str
    observations: tuple[ObjectObservation, ...]


def holdout_queries(
    world: World, holdout_fraction: float = 0.5, seed: int = 0, min_remaining: int = 1
) -> tuple[dict[str, dict[str, list[ObjectObservation]]], list[Query]]:
    """Hold out single-image queries per room.

    Returns the remaining images (room -> image -> observations) and the queries.
    The held-out set depends only on (world, holdout_fraction, seed).
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise UsageError("holdout_fraction must be in (0, 1)")
    by_room: dict[str, dict[str, list[ObjectObservation]]] = {}
    for o in world.observations:
        by_room.setdefault(o.room_id, {}).setdefault(o.image_id, []).append(o)

    rng = np.random.default_rng(seed)
    rest: dict[str, dict[str, list[ObjectObservation]]] = {}
    queries: list[Query] = []
    for room_id in sorted(by_room):
        images = sorted(by_room[room_id])
        n_q = max(1, int(round(holdout_fraction * len(images))))
        if len(images) - n_q < min_remaining:
            raise UsageError(
                f"room {room_id!r}: {len(images)} images cannot supply {n_q} queries "
                f"and {min_remaining} database images"
            )
        held = set(images[i] for i in rng.choice(len(images), size=n_q, replace=False))
        rest[room_id] = {i: by_room[room_id][i] for i in images if i not in held}
        for iid in sorted(held):
            queries.append(Query((iid,), room_id, tuple(by_room[room_id][iid])))
    return rest, queries


def split_query_db(
    world: World, K: int, holdout_fraction: float = 0.5, seed: int = 0
) -> tuple[list[ObjectObservation], list[Query]]:
    """Hold out single-image queries per room, then take K database images from the rest.

    Sweeping K keeps the queries fixed.
    """
    from .relocalizer import select_images

    if K < 1:
        raise UsageError("K must be >= 1")
    rest, queries = holdout_queries(world, holdout_fraction, seed, min_remaining=K)
    db_obs: list[ObjectObservation] = []
    for room_id, images in rest.items():
        for iid in select_images(list(images), K, seed):
            db_obs.extend(images[iid])
    return db_obs, queries
