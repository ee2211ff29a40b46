"""Domain types, observation ingestion, cross-image merging and serialization."""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import FormatVersionError, ParseError, UsageError, ValidationError

DESCRIPTOR_DIM = 256
# mean, std, m1, m2, m3, singular values; two axes each
GEOM_DIM = 12
FORMAT_VERSION = 1

# unit-norm tolerance after ingestion, and the window inside which parse repairs
UNIT_TOL = 1e-4
RENORM_WINDOW = 1e-3


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Keypoints of one object in one image.

    ``points`` holds (x, y) as fractions of image width/height, ``descriptors``
    one unit vector per point.
    """

    points: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValidationError(f"points must have shape (N, 2), got {pts.shape}")
        if desc.ndim != 2:
            raise ValidationError(f"descriptors must have shape (N, D), got {desc.shape}")
        if len(pts) == 0 or len(pts) != len(desc):
            raise ValidationError(
                f"need matching non-empty points/descriptors, got {len(pts)} and {len(desc)}"
            )
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(desc)):
            raise ValidationError("non-finite keypoint data")
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise ValidationError("keypoint coordinate outside [0, 1]")
        norms = np.linalg.norm(desc, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValidationError("descriptor is not unit norm")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "descriptors", _frozen(desc))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return np.array_equal(self.points, other.points) and np.array_equal(
            self.descriptors, other.descriptors
        )


@dataclass(frozen=True)
class ObjectObservation:
    scene_id: str
    room_id: str
    image_id: str
    object_id: str
    keypoints: KeypointSet


@dataclass(frozen=True, eq=False)
class ObjectEmbedding:
    """Flattened C x D_p appearance code."""

    code: np.ndarray

    def __post_init__(self) -> None:
        code = np.asarray(self.code, dtype=np.float64)
        if code.ndim != 1:
            raise ValidationError("embedding must be a flat vector")
        object.__setattr__(self, "code", _frozen(code))

    @property
    def dim(self) -> int:
        return self.code.shape[0]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.code))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObjectEmbedding):
            return NotImplemented
        return np.array_equal(self.code, other.code)


@dataclass(frozen=True, eq=False)
class GeometricFeature:
    """Per-object layout statistics.

    Layout of ``values``: mean(2), std(2), m1(2), m2(2), m3(2), singular values(2).
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (GEOM_DIM,):
            raise ValidationError(f"geometric feature must have {GEOM_DIM} entries")
        object.__setattr__(self, "values", _frozen(v))

    mean = property(lambda self: self.values[0:2])
    std = property(lambda self: self.values[2:4])
    m1 = property(lambda self: self.values[4:6])
    m2 = property(lambda self: self.values[6:8])
    m3 = property(lambda self: self.values[8:10])
    sv = property(lambda self: self.values[10:12])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GeometricFeature):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class RoomObject:
    embedding: ObjectEmbedding
    geom: GeometricFeature
    support: int


@dataclass(frozen=True, eq=False)
class RoomRecord:
    room_id: str
    objects: Mapping[str, RoomObject]
    geom_embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        # canonical object-id order everywhere downstream
        ordered = {k: self.objects[k] for k in sorted(self.objects)}
        object.__setattr__(self, "objects", ordered)
        if self.geom_embedding is not None:
            object.__setattr__(self, "geom_embedding", _frozen(self.geom_embedding))
        for oid, obj in ordered.items():
            if obj.support < 1:
                raise ValidationError(f"object {oid!r} in room {self.room_id!r} has no support")

    @property
    def object_ids(self) -> list[str]:
        return list(self.objects)


@dataclass(frozen=True, eq=False)
class RoomDatabase:
    scene_id: str
    K: int
    rooms: tuple[RoomRecord, ...]
    fingerprint: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "rooms", tuple(self.rooms))
        if self.K < 1:
            raise ValidationError("K must be >= 1")
        ids = [r.room_id for r in self.rooms]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate room ids in database")

    @property
    def room_ids(self) -> list[str]:
        return [r.room_id for r in self.rooms]

    def room(self, room_id: str) -> RoomRecord:
        for r in self.rooms:
            if r.room_id == room_id:
                return r
        raise KeyError(room_id)

    @cached_property
    def object_matrix(self) -> tuple[np.ndarray, np.ndarray, list[int]]:
        """Row-normalized embeddings of all non-empty rooms stacked in room order.

        Returns (matrix, segment starts, indices of the rooms the segments belong to).
        Zero rows stay zero so their cosine with anything is 0. Stored as float32:
        scoring streams this whole matrix per query and is memory-bound.
        """
        rows, starts, owners = [], [], []
        n = 0
        for i, r in enumerate(self.rooms):
            if not r.objects:
                continue
            starts.append(n)
            owners.append(i)
            for obj in r.objects.values():
                rows.append(obj.embedding.code)
                n += 1
        if not rows:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.intp), []
        m = np.stack(rows)
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        m = np.divide(m, norms, out=np.zeros_like(m), where=norms > 0).astype(np.float32)
        m.setflags(write=False)
        return m, np.asarray(starts, dtype=np.intp), owners


def merge_embeddings(embeddings: Sequence[ObjectEmbedding]) -> ObjectEmbedding:
    """Component-wise mean. The result is deliberately left unnormalized."""
    if len(embeddings) == 0:
        raise UsageError("cannot merge an empty list of embeddings")
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise UsageError(f"embedding dimensions differ: {sorted(dims)}")
    return ObjectEmbedding(np.mean([e.code for e in embeddings], axis=0))


def merge_geometric(features: Sequence[GeometricFeature]) -> GeometricFeature:
    if len(features) == 0:
        raise UsageError("cannot merge an empty list of geometric features")
    return GeometricFeature(np.mean([f.values for f in features], axis=0))


# ---------------------------------------------------------------------------
# observation files: one JSON record per line

_OBS_KEYS = ("scene", "room", "image", "object", "points", "desc")


def _fmt(values: Iterable[float], digits: int) -> str:
    return "[" + ",".join(format(float(v), f".{digits}g") for v in values) + "]"


def format_observation(obs: ObjectObservation) -> str:
    kp = obs.keypoints
    head = json.dumps(
        {"scene": obs.scene_id, "room": obs.room_id, "image": obs.image_id, "object": obs.object_id}
    )
    points = "[" + ",".join(_fmt(p, 9) for p in kp.points) + "]"
    desc = "[" + ",".join(_fmt(d, 9) for d in kp.descriptors) + "]"
    return f'{head[:-1]},"points":{points},"desc":{desc}}}'


def write_observations(path: str | Path, observations: Iterable[ObjectObservation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obs in observations:
            fh.write(format_observation(obs))
            fh.write("\n")


def _record_to_observation(rec: object, lineno: int) -> ObjectObservation:
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", lineno)
    missing = [k for k in _OBS_KEYS if k not in rec]
    if missing:
        raise ParseError(f"missing keys {missing}", lineno)
    if "version" in rec and rec["version"] != FORMAT_VERSION:
        raise FormatVersionError(f"line {lineno}: unsupported observation version {rec['version']!r}")
    for k in ("scene", "room", "image", "object"):
        if not isinstance(rec[k], str):
            raise ParseError(f"field {k!r} must be a string", lineno)
    try:
        pts = np.asarray(rec["points"], dtype=np.float64)
        desc = np.asarray(rec["desc"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"non-numeric keypoint data ({exc})", lineno) from None
    name = f"line {lineno} ({rec['room']}/{rec['image']}/{rec['object']})"
    if desc.ndim != 2 or len(desc) == 0:
        raise ValidationError(f"{name}: descriptors must be a non-empty list of vectors")
    norms = np.linalg.norm(desc, axis=1)
    if np.any(np.abs(norms - 1.0) > RENORM_WINDOW):
        raise ValidationError(f"{name}: descriptor norm outside [0.999, 1.001]")
    desc = desc / norms[:, None]
    try:
        kps = KeypointSet(pts, desc)
    except ValidationError as exc:
        raise ValidationError(f"{name}: {exc}") from None
    return ObjectObservation(rec["scene"], rec["room"], rec["image"], rec["object"], kps)


def parse_observations(path: str | Path) -> list[ObjectObservation]:
    """Read an observation file, validating every record.

    Descriptors within 1e-3 of unit norm are renormalized; anything further
    off is rejected rather than repaired.
    """
    out: list[ObjectObservation] = []
    seen: set[tuple[str, str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            obs = _record_to_observation(rec, lineno)
            key = (obs.scene_id, obs.image_id, obs.object_id)
            if key in seen:
                raise ValidationError(
                    f"line {lineno}: object {obs.object_id!r} repeated in image {obs.image_id!r}"
                )
            seen.add(key)
            out.append(obs)
    return out


# ---------------------------------------------------------------------------
# database documents


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def database_to_dict(db: RoomDatabase) -> dict:
    rooms = []
    for r in db.rooms:
        rooms.append(
            {
                "room": r.room_id,
                "objects": [
                    {
                        "object": oid,
                        "support": obj.support,
                        "embedding": obj.embedding.code.tolist(),
                        "geom": obj.geom.values.tolist(),
                    }
                    for oid, obj in r.objects.items()
                ],
                "geom_embedding": None if r.geom_embedding is None else r.geom_embedding.tolist(),
            }
        )
    return {
        "version": FORMAT_VERSION,
        "scene": db.scene_id,
        "K": db.K,
        "rooms": rooms,
        "fingerprint": db.fingerprint,
    }


def database_from_dict(doc: Mapping) -> RoomDatabase:
    if doc.get("version") != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported database version {doc.get('version')!r}")
    try:
        rooms = []
        for r in doc["rooms"]:
            objects = {
                o["object"]: RoomObject(
                    ObjectEmbedding(o["embedding"]), GeometricFeature(o["geom"]), int(o["support"])
                )
                for o in r["objects"]
            }
            ge = r.get("geom_embedding")
            rooms.append(RoomRecord(r["room"], objects, None if ge is None else np.asarray(ge)))
        return RoomDatabase(doc["scene"], int(doc["K"]), tuple(rooms), doc.get("fingerprint", ""))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed database document ({exc!r})") from None


def save_database(db: RoomDatabase, path: str | Path) -> None:
    Path(path).write_text(json.dumps(database_to_dict(db), separators=(",", ":")) + "\n")


def load_database(path: str | Path) -> RoomDatabase:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed database file ({exc.msg})", exc.lineno) from None
    return database_from_dict(doc)
