import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcheck
import oracles
from roomloc.core import GeometricFeature, ObjectEmbedding, RoomDatabase, RoomObject, RoomRecord
from roomloc.errors import GeometryUnavailable, ParseError, UsageError
from roomloc.geometry import (
    GeometryConfig,
    GeometryNetParams,
    backward,
    cosine,
    forward,
    gat_forward,
    geometric_feature,
    geometry_scores,
    pair_loss,
    relative_features,
    room_geom_embedding,
    room_matching_loss,
    scores_from_embedding,
)

SMALL = GeometryConfig(embed_dim=16, hidden_dim=24, out_dim=12, heads=3)


@pytest.fixture(scope="module")
def small_params():
    return GeometryNetParams.initialize(SMALL, seed=5)


class TestGeometricFeature:
    def test_two_points(self):
        f = geometric_feature(np.array([[0.0, 0.0], [1.0, 0.0]]))
        np.testing.assert_allclose(f.mean, [0.5, 0])
        np.testing.assert_allclose(f.std, [0.5, 0])
        assert np.array_equal(f.m1, [0.0, 0.0])
        np.testing.assert_allclose(f.m2, [0.25, 0])
        np.testing.assert_allclose(f.m3, [0, 0])
        np.testing.assert_allclose(f.sv, [0.5, 0], atol=1e-15)

    def test_vs_scatter_eigen_oracle(self, rng):
        for _ in range(20):
            pts = rng.random((rng.integers(2, 30), 2))
            np.testing.assert_allclose(
                geometric_feature(pts).values, oracles.geometric_feature(pts.tolist()), atol=1e-12
            )

    def test_symmetric_set_has_zero_skew(self, rng):
        half = rng.random((5, 2)) * 0.3
        pts = np.vstack([0.5 + half, 0.5 - half])
        np.testing.assert_allclose(geometric_feature(pts).m3, 0, atol=1e-15)

    def test_collinear_rank_one(self, rng):
        t = rng.random(10)
        pts = np.stack([0.1 + 0.5 * t, 0.2 + 0.3 * t], axis=1)
        assert abs(geometric_feature(pts).sv[1]) <= 1e-10

    def test_single_point(self):
        f = geometric_feature(np.array([[0.3, 0.4]]))
        assert np.array_equal(f.sv, [0, 0]) and np.array_equal(f.std, [0, 0])

    def test_empty(self):
        with pytest.raises(UsageError):
            geometric_feature(np.zeros((0, 2)))

    @given(st.integers(1, 40), st.integers(0, 100_000), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
    def test_translation_covariant(self, n, seed, dx, dy):
        pts = 0.25 + 0.5 * np.random.default_rng(seed).random((n, 2))
        a = geometric_feature(pts)
        b = geometric_feature(pts + [dx, dy])
        np.testing.assert_allclose(b.mean - a.mean, [dx, dy], atol=1e-12)
        np.testing.assert_allclose(b.values[2:], a.values[2:], atol=1e-10)

    @given(st.integers(1, 40), st.integers(0, 100_000))
    def test_value_ranges(self, n, seed):
        f = geometric_feature(np.random.default_rng(seed).random((n, 2)))
        assert np.all((f.mean >= 0) & (f.mean <= 1))
        assert np.all(f.std >= 0) and np.all(f.sv >= 0)
        assert np.array_equal(f.m1, [0.0, 0.0])


class TestRelativeFeatures:
    def test_count_and_zero_for_equal(self, small_params, rng):
        f = rng.random((3, 12))
        assert relative_features(f, small_params).shape == (3, 16)
        same = np.vstack([f[0], f[0]])
        assert np.all(relative_features(same, small_params) == 0)

    def test_reordering_flips_signs(self, small_params, rng):
        f = rng.random((4, 12))
        e = relative_features(f, small_params)
        e_rev = relative_features(f[::-1], small_params)
        # pair (j, k) in the original is pair (3-k, 3-j) reversed, with the opposite sign
        pairs = [(j, k) for j in range(4) for k in range(j + 1, 4)]
        for n, (j, k) in enumerate(pairs):
            m = pairs.index((3 - k, 3 - j))
            np.testing.assert_allclose(e[n], -e_rev[m], atol=1e-12)

    def test_one_object_unavailable(self, small_params):
        with pytest.raises(GeometryUnavailable):
            relative_features(np.zeros((1, 12)), small_params)


class TestGat:
    def test_vs_loop_oracle(self, small_params, rng):
        nodes = rng.standard_normal((5, 16))
        t = small_params.tensors
        h1 = oracles.gat_layer(nodes, t["gat1.w"], t["gat1.att"], 0.2, True)
        want = oracles.gat_layer(h1, t["gat2.w"], t["gat2.att"], 0.2, False)
        np.testing.assert_allclose(gat_forward(nodes, small_params), want, atol=1e-12)

    def test_single_node_direct_formula(self, small_params, rng):
        x = rng.standard_normal((1, 16))
        t = small_params.tensors
        h1 = np.maximum(x @ t["gat1.w"], 0)
        # attention over {self} is 1; heads of layer 2 are averaged after the rectifier
        z2 = np.maximum((h1 @ t["gat2.w"]).reshape(3, 12), 0).mean(axis=0)
        np.testing.assert_allclose(gat_forward(x, small_params)[0], z2, atol=1e-12)

    def test_identical_nodes_identical_outputs(self, small_params, rng):
        x = np.repeat(rng.standard_normal((1, 16)), 4, axis=0)
        out = gat_forward(x, small_params)
        np.testing.assert_allclose(out, np.repeat(out[:1], 4, axis=0), atol=1e-12)

    def test_inference_deterministic_and_attention_normalized(self, small_params, rng):
        x = rng.standard_normal((4, 16))
        a, (att1, att2) = gat_forward(x, small_params, return_attention=True)
        assert np.array_equal(a, gat_forward(x, small_params))
        np.testing.assert_allclose(att1.sum(axis=-1), 1, atol=1e-9)
        np.testing.assert_allclose(att2.sum(axis=-1), 1, atol=1e-9)

    def test_training_needs_rng(self, small_params):
        with pytest.raises(UsageError):
            gat_forward(np.ones((2, 16)), small_params, training=True)


class TestRoomEmbedding:
    def test_vs_loop_oracle(self, small_params, rng):
        f = rng.random((4, 12))
        np.testing.assert_allclose(
            room_geom_embedding(f, small_params), oracles.room_embedding(f, small_params.tensors), atol=1e-12
        )

    def test_default_dimension(self, rng):
        p = GeometryNetParams.initialize(seed=0)
        assert room_geom_embedding(rng.random((3, 12)), p).shape == (1024,)

    def test_identical_outputs_mean(self, small_params, rng):
        f = rng.random((1, 12))
        # all objects equal: every relative feature is zero, every node equals the zero-input output
        r = room_geom_embedding(np.repeat(f, 3, axis=0), small_params)
        node = gat_forward(np.zeros((1, 16)), small_params)[0]
        np.testing.assert_allclose(r, node, atol=1e-12)

    @given(st.integers(2, 7), st.integers(0, 100_000))
    def test_mapping_input_is_order_free(self, z, seed):
        r = np.random.default_rng(seed)
        p = GeometryNetParams.initialize(SMALL, seed=1)
        geoms = {f"o{i}": GeometricFeature(r.random(12)) for i in range(z)}
        keys = list(geoms)
        r.shuffle(keys)
        a = room_geom_embedding(geoms, p)
        b = room_geom_embedding({k: geoms[k] for k in keys}, p)
        assert np.linalg.norm(a - b) <= 1e-6 * max(np.linalg.norm(a), 1e-300)

    def test_batched_equals_single(self, small_params, rng):
        graphs = [rng.random((z, 12)) for z in (2, 5, 3)]
        batch, _ = forward(small_params, graphs)
        for g, r in zip(graphs, batch):
            np.testing.assert_allclose(r, room_geom_embedding(g, small_params), atol=1e-12)

    def test_one_object(self, small_params):
        with pytest.raises(GeometryUnavailable):
            room_geom_embedding(np.zeros((1, 12)), small_params)


def geom_db(embs):
    g = GeometricFeature(np.zeros(12))
    e = ObjectEmbedding([1.0])
    rooms = [
        RoomRecord(f"r{i}", {"a": RoomObject(e, g, 1), "b": RoomObject(e, g, 1)}, v) for i, v in enumerate(embs)
    ]
    return RoomDatabase("s", 1, tuple(rooms))


class TestGeometryScores:
    def test_equal_and_orthogonal(self):
        db = geom_db([np.array([1.0, 0, 0]), np.array([0, 1.0, 0])])
        s = scores_from_embedding(db, np.array([1.0, 0, 0]))
        assert s == {"r0": 1.0, "r1": 0.0}
        assert set(scores_from_embedding(db, np.array([0, 0, 2.0])).values()) == {0.0}

    def test_vs_cosine_oracle(self, small_params, rng):
        embs = [rng.standard_normal(12) for _ in range(5)]
        q = rng.random((3, 12))
        got = geometry_scores(geom_db(embs), q, small_params)
        r_q = room_geom_embedding(q, small_params)
        for i, v in enumerate(embs):
            assert abs(got[f"r{i}"] - oracles.cosine(v, r_q)) <= 1e-12

    def test_missing_embedding_scores_zero(self):
        db = geom_db([None, np.ones(3)])
        assert scores_from_embedding(db, np.ones(3))["r0"] == 0.0

    def test_zero_vector_cosine(self):
        assert cosine(np.zeros(3), np.ones(3)) == 0.0


class TestLoss:
    def test_examples(self):
        a = np.array([1.0, 0.0])
        loss, _, _ = room_matching_loss([(a, a, True)])
        assert loss == 0.0
        b = np.array([0.1, np.sqrt(1 - 0.01)])
        assert room_matching_loss([(a, b, False)], 0.2)[0] == 0.0
        c = np.array([0.5, np.sqrt(0.75)])
        assert room_matching_loss([(a, c, False)], 0.2)[0] == pytest.approx(0.3)

    def test_gradient_vs_finite_differences(self, rng):
        rp, rq = rng.standard_normal(6), rng.standard_normal(6)
        rq = rq - (rq @ rp) / (rp @ rp) * rp + 0.9 * rp  # cos well above the margin
        for positive in (True, False):
            _, [(gp, gq)], _ = room_matching_loss([(rp, rq, positive)], 0.2)
            for vec, g, which in ((rp, gp, 0), (rq, gq, 1)):
                num = np.zeros(6)
                for i in range(6):
                    v1, v2 = vec.copy(), vec.copy()
                    v1[i] += 1e-5
                    v2[i] -= 1e-5
                    args1 = (v1, rq) if which == 0 else (rp, v1)
                    args2 = (v2, rq) if which == 0 else (rp, v2)
                    num[i] = (oracles.pair_loss(*args1, positive, 0.2) - oracles.pair_loss(*args2, positive, 0.2)) / 2e-5
                assert np.linalg.norm(g - num) / (np.linalg.norm(g) + np.linalg.norm(num)) < 1e-4

    @given(st.integers(1, 8), st.integers(0, 100_000))
    def test_nonnegative_and_matches_oracle(self, n, seed):
        r = np.random.default_rng(seed)
        pairs = [(r.standard_normal(4), r.standard_normal(4), bool(r.integers(2))) for _ in range(n)]
        loss, _, _ = room_matching_loss(pairs, 0.2)
        assert loss >= 0
        assert loss == pytest.approx(sum(oracles.pair_loss(a, b, s, 0.2) for a, b, s in pairs), abs=1e-12)

    def test_zero_iff_satisfied(self):
        a, b = np.array([1.0, 0]), np.array([0.0, 1.0])
        assert room_matching_loss([(a, 2 * a, True), (a, b, False)])[0] == pytest.approx(0.0, abs=1e-15)
        assert room_matching_loss([(a, a + 0.1 * b, True)])[0] > 0

    def test_zero_norm_pairs_excluded(self):
        res = pair_loss(np.array([[0.0, 0], [1.0, 0]]), [0], [1], [True])
        assert res.loss == 0.0 and res.excluded == 1 and np.all(res.grad == 0)

    def test_empty(self):
        with pytest.raises(UsageError):
            room_matching_loss([])


class TestGradients:
    def test_all_tensors_match_finite_differences(self):
        params, graphs, pairs = gradcheck.setup(seed=2)
        margins, _ = gradcheck.hinge_margins(params, graphs, pairs)
        assert margins.min() > 1e-3
        for name, (rel, na, nn) in gradcheck.check(params, graphs, pairs).items():
            assert gradcheck.passes(rel, na, nn), (name, rel, na, nn)

    def test_dropout_path(self):
        # same rng seed per evaluation -> the same dropout masks on both sides
        cfg = GeometryConfig(embed_dim=6, hidden_dim=8, out_dim=5, heads=2, dropout=0.3)
        params = GeometryNetParams.initialize(cfg, seed=4)
        r = np.random.default_rng(0)
        graphs = [r.random((3, 12)) for _ in range(3)]
        pairs = (np.array([0, 1]), np.array([1, 2]), np.array([True, True]), 0.2)

        def loss(p):
            emb, _ = forward(p, graphs, training=True, rng=np.random.default_rng(9))
            return pair_loss(emb, *pairs).loss

        emb, cache = forward(params, graphs, training=True, rng=np.random.default_rng(9))
        grads = backward(params, cache, pair_loss(emb, *pairs).grad)
        for name in ("gat1.w", "gat2.att", "mlp.w1"):
            a = params[name]
            num = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                up, dn = np.array(a), np.array(a)
                up[idx] += 1e-5
                dn[idx] -= 1e-5
                num[idx] = (loss(params.replace({name: up})) - loss(params.replace({name: dn}))) / 2e-5
            rel = np.linalg.norm(grads[name] - num) / (np.linalg.norm(grads[name]) + np.linalg.norm(num))
            assert rel < 1e-4, (name, rel)


class TestParams:
    def test_round_trip_bit_exact(self, tmp_path, small_params):
        small_params.save(tmp_path / "g.json")
        back = GeometryNetParams.load(tmp_path / "g.json")
        assert back.config == small_params.config
        for k in small_params.tensors:
            assert np.array_equal(back[k], small_params[k])
        assert back.fingerprint() == small_params.fingerprint()

    def test_bad_file(self, tmp_path, small_params):
        doc = small_params.to_dict()
        doc["tensors"]["mlp.b1"]["dtype"] = "float16"
        with pytest.raises(ParseError):
            GeometryNetParams.from_dict(doc)
        (tmp_path / "g.json").write_text("nope")
        with pytest.raises(ParseError):
            GeometryNetParams.load(tmp_path / "g.json")

    def test_shape_checked(self, small_params):
        with pytest.raises(UsageError):
            small_params.replace({"mlp.b1": np.zeros(3)})

    def test_config_validation(self):
        with pytest.raises(UsageError):
            GeometryConfig(hidden_dim=10, heads=3)
        with pytest.raises(UsageError):
            GeometryConfig(dropout=1.0)
