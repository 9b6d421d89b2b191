"""Encoder shapes, projection linearity, pool layout, feature cache."""

import numpy as np
import pytest

from refilter.context_encoder import (
    ContextEncoder,
    EncoderConfig,
    FeatureCache,
    Projector,
    build_pool,
    pool_origin,
)
from refilter.corpus import Chunk
from refilter.errors import CacheError, DimensionError
from refilter.numerics import Tensor, finite_diff_check, no_grad


def _chunk(cid, ids, noise=False):
    return Chunk(cid, cid.split("#")[0], "t", tuple(ids), is_noise=noise)


@pytest.fixture(scope="module")
def encoder():
    return ContextEncoder(EncoderConfig(vocab_size=40, d_model=8, n_heads=2, chunk_len=4), seed=3)


@pytest.fixture(scope="module")
def projector():
    return Projector(8, 12, seed=4)


class TestEncode:
    def test_output_shape(self, encoder):
        out = encoder.encode(np.ones((5, 4), dtype=int))
        assert out.shape == (5, 4, 8)

    def test_all_pad_chunk_deterministic(self, encoder):
        chunk = _chunk("d#0000", [0, 0, 0, 0])
        a = encoder.encode_chunk(chunk).data
        b = encoder.encode_chunk(chunk).data
        assert np.array_equal(a, b)

    def test_one_token_difference_changes_features(self, encoder):
        a = encoder.encode(np.array([[1, 2, 3, 4]])).data
        b = encoder.encode(np.array([[1, 2, 9, 4]])).data
        assert not np.allclose(a, b)

    def test_bidirectional_context(self, encoder):
        """Changing a late token changes EARLY token features (non-causal)."""
        a = encoder.encode(np.array([[1, 2, 3, 4]])).data
        b = encoder.encode(np.array([[1, 2, 3, 9]])).data
        assert not np.allclose(a[0, 0], b[0, 0])

    def test_wrong_length_rejected(self, encoder):
        with pytest.raises(DimensionError):
            encoder.encode(np.ones((2, 7), dtype=int))

    def test_stamp_tracks_parameters(self, encoder):
        s1 = encoder.stamp()
        p = next(iter(encoder.params.values()))
        p.tensor.data[0] += 1e-9
        s2 = encoder.stamp()
        p.tensor.data[0] -= 1e-9
        assert s1 != s2 and encoder.stamp() == s1


class TestProjector:
    def test_zero_weight_zero_output(self):
        proj = Projector(4, 6, seed=0)
        proj.w_p.tensor.data[...] = 0.0
        out = proj.project(Tensor(np.random.default_rng(0).normal(size=(3, 4))))
        assert np.all(out.data == 0.0)

    def test_identity_weight(self):
        proj = Projector(5, 5, seed=0)
        proj.w_p.tensor.data[...] = np.eye(5)
        x = np.random.default_rng(1).normal(size=(2, 5))
        np.testing.assert_array_equal(proj.project(Tensor(x)).data, x)

    def test_exact_linearity(self, projector):
        rng = np.random.default_rng(2)
        f1, f2 = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
        a = 2.5
        lhs = projector.project(Tensor(a * f1 + f2)).data
        rhs = a * projector.project(Tensor(f1)).data + projector.project(Tensor(f2)).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


class TestPoolLayout:
    @pytest.mark.parametrize("k", [1, 3, 5])
    @pytest.mark.parametrize("s", [4, 16])
    def test_origin_exhaustive(self, k, s):
        for j in range(k * s):
            rank, offset = pool_origin(j, s)
            assert rank == j // s and offset == j % s
            assert 0 <= rank < k and 0 <= offset < s

    def test_pool_is_rank_ordered_concat(self, encoder, projector):
        rng = np.random.default_rng(5)
        chunks = [
            _chunk(f"d#{i:04d}", rng.integers(1, 40, size=4)) for i in range(3)
        ]
        pool = build_pool([chunks], encoder, projector, pad_id=0)
        assert pool.tensor.shape == (1, 12, 12)
        assert pool.n_slots == 12
        for j in range(12):
            rank, offset = pool.origin(j)
            assert pool.chunk_ids[0, j] == chunks[rank].chunk_id
            assert pool.token_ids[0, j] == chunks[rank].token_ids[offset]

    def test_paper_scale_pool_is_768(self):
        enc = ContextEncoder(
            EncoderConfig(vocab_size=40, d_model=8, n_heads=2, chunk_len=256), seed=0
        )
        proj = Projector(8, 12, seed=0)
        rng = np.random.default_rng(6)
        chunks = [_chunk(f"d#{i:04d}", rng.integers(1, 40, size=256)) for i in range(3)]
        pool = build_pool([chunks], enc, proj, pad_id=0)
        assert pool.tensor.shape[1] == 768

    def test_mixed_k_rejected(self, encoder, projector):
        c = _chunk("d#0000", [1, 2, 3, 4])
        with pytest.raises(DimensionError):
            build_pool([[c, c], [c]], encoder, projector, pad_id=0)

    def test_flags(self, encoder, projector):
        chunks = [
            _chunk("d#0000", [1, 2, 0, 0]),
            _chunk("n#0000", [3, 4, 5, 6], noise=True),
        ]
        pool = build_pool([chunks], encoder, projector, pad_id=0)
        assert pool.pad_flags[0].tolist() == [False, False, True, True] + [False] * 4
        assert pool.noise_flags[0].tolist() == [False] * 4 + [True] * 4


class TestGradientFlow:
    def test_grads_reach_encoder_and_projection(self, encoder, projector):
        rng = np.random.default_rng(7)
        chunks = [_chunk(f"d#{i:04d}", rng.integers(1, 40, size=4)) for i in range(2)]
        params = {**encoder.params, **projector.params}

        def loss_fn():
            pool = build_pool([chunks], encoder, projector, pad_id=0)
            return (pool.tensor * pool.tensor).sum()

        report = finite_diff_check(loss_fn, params, max_coords_per_param=3, seed=8)
        assert report.passed, report.summary()


class TestFeatureCache:
    def test_get_before_put_misses(self):
        cache = FeatureCache("stamp", 8, 4)
        assert cache.get("nope") is None

    def test_put_get_equal(self):
        cache = FeatureCache("stamp", 8, 4)
        feat = np.random.default_rng(9).normal(size=(4, 8))
        cache.put("c1", feat)
        np.testing.assert_array_equal(cache.get("c1"), feat)

    def test_wrong_shape_rejected(self):
        cache = FeatureCache("stamp", 8, 4)
        with pytest.raises(DimensionError):
            cache.put("c1", np.zeros((3, 8)))

    def test_save_load_bitwise(self, tmp_path):
        cache = FeatureCache("stampA", 8, 4)
        rng = np.random.default_rng(10)
        for i in range(5):
            cache.put(f"c{i}", rng.normal(size=(4, 8)))
        path = tmp_path / "feat.cache"
        cache.save(path)
        loaded = FeatureCache.load(path, "stampA")
        for i in range(5):
            np.testing.assert_array_equal(loaded.get(f"c{i}"), cache.get(f"c{i}"))

    def test_stale_stamp_invalidates_all(self, tmp_path):
        cache = FeatureCache("old", 8, 4)
        cache.put("c1", np.zeros((4, 8)))
        path = tmp_path / "feat.cache"
        cache.save(path)
        loaded = FeatureCache.load(path, "new-stamp")
        assert len(loaded) == 0 and loaded.get("c1") is None

    def test_corrupt_store_raises(self, tmp_path):
        path = tmp_path / "bad.cache"
        path.write_bytes(b"garbage")
        with pytest.raises(CacheError):
            FeatureCache.load(path, "any")

    def test_cached_pool_matches_fresh(self, encoder, projector):
        rng = np.random.default_rng(11)
        chunks = [_chunk(f"d#{i:04d}", rng.integers(1, 40, size=4)) for i in range(3)]
        with no_grad():
            fresh = build_pool([chunks], encoder, projector, pad_id=0)
        cache = FeatureCache(encoder.stamp(), 8, 4)
        cached1 = build_pool([chunks], encoder, projector, pad_id=0, cache=cache)
        cached2 = build_pool([chunks], encoder, projector, pad_id=0, cache=cache)
        assert np.array_equal(fresh.tensor.data, cached1.tensor.data)
        assert np.array_equal(cached1.tensor.data, cached2.tensor.data)
        assert len(cache) == 3
