import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import unit_rows
from roomloc.core import (
    GeometricFeature,
    KeypointSet,
    ObjectEmbedding,
    ObjectObservation,
    RoomDatabase,
    RoomObject,
    RoomRecord,
    database_from_dict,
    database_to_dict,
    load_database,
    merge_embeddings,
    merge_geometric,
    parse_observations,
    save_database,
    write_observations,
)
from roomloc.errors import FormatVersionError, ParseError, UsageError, ValidationError


def make_obs(rng, room="r0", image="i0", obj="o0", n=4, d=8):
    return ObjectObservation("s", room, image, obj, KeypointSet(rng.random((n, 2)), unit_rows(rng, n, d)))


def record(points, desc, **kw):
    rec = {"scene": "s", "room": "r", "image": "i", "object": "o", "points": points, "desc": desc}
    rec.update(kw)
    return json.dumps(rec)


class TestKeypointSet:
    def test_valid(self, rng):
        k = KeypointSet(rng.random((3, 2)), unit_rows(rng, 3, 5))
        assert len(k) == 3 and k.dim == 5
        assert not k.points.flags.writeable

    def test_rejects_coordinate_out_of_range(self):
        with pytest.raises(ValidationError):
            KeypointSet([[0.5, 1.2]], [[1.0, 0.0]])

    def test_rejects_non_unit_descriptor(self):
        with pytest.raises(ValidationError):
            KeypointSet([[0.5, 0.5]], [[1.01, 0.0]])

    def test_rejects_length_mismatch_and_empty(self):
        with pytest.raises(ValidationError):
            KeypointSet([[0.5, 0.5], [0.1, 0.1]], [[1.0, 0.0]])
        with pytest.raises(ValidationError):
            KeypointSet(np.zeros((0, 2)), np.zeros((0, 3)))

    def test_rejects_nan(self):
        with pytest.raises(ValidationError):
            KeypointSet([[np.nan, 0.5]], [[1.0, 0.0]])


class TestParse:
    def test_two_records(self, tmp_path):
        p = tmp_path / "o.jsonl"
        p.write_text(
            record([[0.1, 0.2]], [[1.0, 0.0]]) + "\n" + record([[0.3, 0.4]], [[0.0, 1.0]], object="o2") + "\n"
        )
        obs = parse_observations(p)
        assert len(obs) == 2
        assert obs[1].object_id == "o2"

    def test_coordinate_out_of_range(self, tmp_path):
        p = tmp_path / "o.jsonl"
        p.write_text(record([[1.2, 0.2]], [[1.0, 0.0]]) + "\n")
        with pytest.raises(ValidationError):
            parse_observations(p)

    def test_renormalizes_inside_window(self, tmp_path):
        p = tmp_path / "o.jsonl"
        p.write_text(record([[0.1, 0.2]], [[1.0005, 0.0]]) + "\n")
        (o,) = parse_observations(p)
        assert np.linalg.norm(o.keypoints.descriptors[0]) == pytest.approx(1.0, abs=1e-15)

    def test_rejects_outside_window(self, tmp_path):
        p = tmp_path / "o.jsonl"
        p.write_text(record([[0.1, 0.2]], [[1.002, 0.0]]) + "\n")
        with pytest.raises(ValidationError, match="line 1"):
            parse_observations(p)

    def test_malformed_json_reports_line(self, tmp_path):
        p = tmp_path / "o.jsonl"
        p.write_text(record([[0.1, 0.2]], [[1.0, 0.0]]) + "\n{oops\n")
        with pytest.raises(ParseError, match="line 2"):
            parse_observations(p)

    def test_missing_key(self, tmp_path):
        p = tmp_path / "o.jsonl"
        p.write_text(json.dumps({"scene": "s", "room": "r"}) + "\n")
        with pytest.raises(ParseError, match="missing"):
            parse_observations(p)

    def test_duplicate_object_in_image(self, tmp_path):
        p = tmp_path / "o.jsonl"
        line = record([[0.1, 0.2]], [[1.0, 0.0]])
        p.write_text(line + "\n" + line + "\n")
        with pytest.raises(ValidationError, match="repeated"):
            parse_observations(p)

    def test_version_checked(self, tmp_path):
        p = tmp_path / "o.jsonl"
        p.write_text(record([[0.1, 0.2]], [[1.0, 0.0]], version=7) + "\n")
        with pytest.raises(FormatVersionError):
            parse_observations(p)

    def test_round_trip_9_digits(self, tmp_path, rng):
        obs = [make_obs(rng, image=f"i{i}", obj=f"o{j}") for i in range(5) for j in range(4)]
        p = tmp_path / "o.jsonl"
        write_observations(p, obs)
        back = parse_observations(p)
        for a, b in zip(obs, back):
            assert (a.room_id, a.image_id, a.object_id) == (b.room_id, b.image_id, b.object_id)
            # oracle: what 9 significant digits keep
            want_pts = np.array([[float(f"{v:.9g}") for v in row] for row in a.keypoints.points])
            assert np.array_equal(b.keypoints.points, want_pts)
            np.testing.assert_allclose(b.keypoints.descriptors, a.keypoints.descriptors, atol=1e-8)

    def test_serializer_output_reparses_identically(self, tmp_path, rng):
        p, q = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_observations(p, [make_obs(rng, obj=f"o{j}") for j in range(3)])
        write_observations(q, parse_observations(p))
        assert parse_observations(q)[2].keypoints == parse_observations(p)[2].keypoints


class TestMerge:
    def test_singleton(self, rng):
        v = ObjectEmbedding(rng.standard_normal(6))
        assert merge_embeddings([v]) == v

    def test_opposites_cancel(self, rng):
        v = rng.standard_normal(6)
        assert np.all(merge_embeddings([ObjectEmbedding(v), ObjectEmbedding(-v)]).code == 0)

    def test_mean_vs_oracle(self, rng):
        vs = unit_rows(rng, 5, 16)
        got = merge_embeddings([ObjectEmbedding(v) for v in vs]).code
        np.testing.assert_allclose(got, oracles.mean_vector(vs.tolist()), rtol=0, atol=1e-12)

    def test_not_renormalized(self, rng):
        vs = unit_rows(rng, 2, 16)
        assert merge_embeddings([ObjectEmbedding(v) for v in vs]).norm < 1.0

    def test_geometric_singleton_and_arithmetic(self, rng):
        o = GeometricFeature(rng.random(12))
        assert merge_geometric([o]) == o
        a, b = np.zeros(12), np.zeros(12)
        a[0], b[0] = 0.2, 0.4
        assert merge_geometric([GeometricFeature(a), GeometricFeature(b)]).mean[0] == pytest.approx(0.3)

    def test_geometric_vs_oracle(self, rng):
        fs = rng.random((3, 12))
        got = merge_geometric([GeometricFeature(f) for f in fs]).values
        np.testing.assert_allclose(got, oracles.mean_vector(fs.tolist()), rtol=0, atol=1e-12)

    def test_empty_is_usage_error(self):
        with pytest.raises(UsageError):
            merge_embeddings([])
        with pytest.raises(UsageError):
            merge_geometric([])

    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_permutation_invariant(self, n, seed):
        r = np.random.default_rng(seed)
        vs = [ObjectEmbedding(v) for v in unit_rows(r, n, 8)]
        perm = r.permutation(n)
        a = merge_embeddings(vs).code
        b = merge_embeddings([vs[i] for i in perm]).code
        np.testing.assert_allclose(a, b, atol=1e-15)

    @given(st.integers(1, 5), st.integers(0, 10_000))
    def test_idempotent_on_repeats(self, n, seed):
        v = ObjectEmbedding(unit_rows(np.random.default_rng(seed), 1, 8)[0])
        np.testing.assert_allclose(merge_embeddings([v] * n).code, v.code, atol=1e-15)


def small_db(rng, with_geom=True):
    rooms = []
    for r in range(3):
        objs = {
            f"o{j}": RoomObject(ObjectEmbedding(unit_rows(rng, 1, 8)[0]), GeometricFeature(rng.random(12)), 1 + j)
            for j in range(r + 1)
        }
        ge = rng.standard_normal(4) if with_geom and r else None
        rooms.append(RoomRecord(f"room{r}", objs, ge))
    return RoomDatabase("s", 2, tuple(rooms), "abc")


class TestDatabase:
    def test_round_trip_exact(self, tmp_path, rng):
        db = small_db(rng)
        p = tmp_path / "db.json"
        save_database(db, p)
        back = load_database(p)
        assert back.room_ids == db.room_ids and back.K == 2 and back.fingerprint == "abc"
        for a, b in zip(db.rooms, back.rooms):
            assert a.object_ids == b.object_ids
            for oid in a.objects:
                assert a.objects[oid] == b.objects[oid]
            if a.geom_embedding is None:
                assert b.geom_embedding is None
            else:
                assert np.array_equal(a.geom_embedding, b.geom_embedding)
        save_database(back, tmp_path / "db2.json")
        assert (tmp_path / "db2.json").read_bytes() == p.read_bytes()

    def test_version_checked(self, rng):
        doc = database_to_dict(small_db(rng))
        doc["version"] = 2
        with pytest.raises(FormatVersionError):
            database_from_dict(doc)

    def test_duplicate_rooms_rejected(self, rng):
        r = small_db(rng).rooms[0]
        with pytest.raises(ValidationError):
            RoomDatabase("s", 1, (r, r))

    def test_objects_sorted_by_id(self, rng):
        e = ObjectEmbedding(np.ones(4))
        g = GeometricFeature(np.zeros(12))
        rec = RoomRecord("r", {"b": RoomObject(e, g, 1), "a": RoomObject(e, g, 1)})
        assert rec.object_ids == ["a", "b"]

    def test_zero_support_rejected(self):
        with pytest.raises(ValidationError):
            RoomRecord("r", {"a": RoomObject(ObjectEmbedding(np.ones(4)), GeometricFeature(np.zeros(12)), 0)})

    def test_object_matrix_layout(self, rng):
        db = small_db(rng)
        m, starts, owners = db.object_matrix
        assert m.shape == (6, 8) and list(starts) == [0, 1, 3] and owners == [0, 1, 2]
        np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-6)
