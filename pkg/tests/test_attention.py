import numpy as np
import pytest

from naive_ref import naive_mha, naive_pe_pair, naive_transblock
from pointformer.attention import (
    AttentionParams,
    identity_linformer,
    linformer_dim,
    linformer_project,
    make_linformer,
    make_pe_net,
    multi_head_attention,
    relative_pe,
    transblock,
)
from pointformer.errors import DimensionError
from pointformer.tensor import ParamStore, Tensor, no_grad


def make_params(seed=0, d_model=8, heads=2, pe=True, linformer=None, layers=1, dtype=np.float64):
    store = ParamStore(seed, dtype=dtype)
    pe_net = make_pe_net(store, "pe", heads, hidden=6) if pe else None
    stack = []
    for i in range(layers):
        proj = None
        if linformer is not None:
            n_max, r = linformer
            proj = make_linformer(store, f"layer{i}/lin", n_max, r)
        stack.append(
            AttentionParams.create(store, f"layer{i}", d_model, heads, pe_net=pe_net, linformer=proj)
        )
    return stack, store


class TestRelativePE:
    def test_single_point_bias_constant(self, rng):
        layers, _ = make_params()
        pe = layers[0].pe_net
        x = Tensor(rng.uniform(-1, 1, size=(1, 3)))
        bias = relative_pe(pe, x, x)
        zero_out = pe(Tensor(np.zeros((1, 3)))).data[0]
        for m in range(2):
            np.testing.assert_allclose(bias.data[m], zero_out[m])

    def test_translation_invariance(self, rng):
        layers, _ = make_params()
        pe = layers[0].pe_net
        xq = rng.uniform(-1, 1, size=(4, 3))
        xk = rng.uniform(-1, 1, size=(6, 3))
        t = np.array([11.0, -4.0, 0.5])
        a = relative_pe(pe, Tensor(xq), Tensor(xk)).data
        b = relative_pe(pe, Tensor(xq + t), Tensor(xk + t)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_matches_per_pair_oracle(self, rng):
        layers, _ = make_params()
        pe = layers[0].pe_net
        xq = rng.uniform(-1, 1, size=(5, 3))
        xk = rng.uniform(-1, 1, size=(7, 3))
        bias = relative_pe(pe, Tensor(xq), Tensor(xk)).data
        for i in range(5):
            for j in range(7):
                expected = naive_pe_pair(pe, xq[i], xk[j])
                np.testing.assert_allclose(bias[:, i, j], expected, atol=1e-12)

    def test_chunked_evaluation_matches_single_shot(self, rng):
        import pointformer.attention as attn_mod

        layers, _ = make_params()
        pe = layers[0].pe_net
        xq = Tensor(rng.uniform(-1, 1, size=(40, 3)))
        xk = Tensor(rng.uniform(-1, 1, size=(50, 3)))
        full = relative_pe(pe, xq, xk).data
        old = attn_mod._PE_CHUNK_ROWS
        attn_mod._PE_CHUNK_ROWS = 128
        try:
            chunked = relative_pe(pe, xq, xk).data
        finally:
            attn_mod._PE_CHUNK_ROWS = old
        np.testing.assert_array_equal(full, chunked)

    def test_coordinate_width_check(self, rng):
        layers, _ = make_params()
        with pytest.raises(DimensionError):
            relative_pe(layers[0].pe_net, Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))))


class TestMultiHeadAttention:
    def test_single_key_forced_weights(self, rng):
        layers, _ = make_params()
        p = layers[0]
        q = Tensor(rng.normal(size=(4, 8)))
        k = Tensor(rng.normal(size=(1, 8)))
        xq = Tensor(rng.uniform(size=(4, 3)))
        xk = Tensor(rng.uniform(size=(1, 3)))
        out, record = multi_head_attention(p, q, k, xq, xk)
        np.testing.assert_array_equal(record.weights.data, np.ones((2, 4, 1)))
        # output = residual + per-head value transform of the single key
        v = np.concatenate([p.wv[m](k).data for m in range(2)], axis=1)
        np.testing.assert_allclose(out.data, q.data + np.broadcast_to(v, (4, 8)), atol=1e-12)

    def test_key_permutation_invariance(self, rng):
        layers, _ = make_params(dtype=np.float32)
        p = layers[0]
        q = Tensor(rng.normal(size=(5, 8)).astype(np.float32))
        k = rng.normal(size=(9, 8)).astype(np.float32)
        xq = Tensor(rng.uniform(size=(5, 3)).astype(np.float32))
        xk = rng.uniform(size=(9, 3)).astype(np.float32)
        out, _ = multi_head_attention(p, q, Tensor(k), xq, Tensor(xk))
        perm = rng.permutation(9)
        out_p, _ = multi_head_attention(p, q, Tensor(k[perm]), xq, Tensor(xk[perm]))
        np.testing.assert_allclose(out.data, out_p.data, atol=1e-6)

    def test_matches_naive_oracle(self, rng):
        layers, _ = make_params()
        p = layers[0]
        qf = rng.normal(size=(6, 8))
        kf = rng.normal(size=(7, 8))
        xq = rng.uniform(size=(6, 3))
        xk = rng.uniform(size=(7, 3))
        out, record = multi_head_attention(p, Tensor(qf), Tensor(kf), Tensor(xq), Tensor(xk))
        expected, expected_w = naive_mha(p, qf, kf, xq, xk)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)
        np.testing.assert_allclose(record.weights.data, expected_w, atol=1e-9)

    def test_translation_leaves_weights_unchanged(self, rng):
        layers, _ = make_params()
        p = layers[0]
        qf = Tensor(rng.normal(size=(5, 8)))
        kf = Tensor(rng.normal(size=(6, 8)))
        xq = rng.uniform(size=(5, 3))
        xk = rng.uniform(size=(6, 3))
        t = np.array([1.7, -2.3, 0.9])
        _, rec_a = multi_head_attention(p, qf, kf, Tensor(xq), Tensor(xk))
        _, rec_b = multi_head_attention(p, qf, kf, Tensor(xq + t), Tensor(xk + t))
        np.testing.assert_allclose(rec_a.weights.data, rec_b.weights.data, atol=1e-9)

    def test_records_row_stochastic(self, rng):
        layers, _ = make_params(heads=4, d_model=8, seed=3)
        p = layers[0]
        f = Tensor(rng.normal(size=(10, 8)))
        x = Tensor(rng.uniform(size=(10, 3)))
        _, record = multi_head_attention(p, f, f, x, x)
        w = record.weights.data
        assert (w >= 0).all() and (w <= 1).all()
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    def test_width_mismatch(self, rng):
        layers, _ = make_params()
        with pytest.raises(DimensionError):
            multi_head_attention(
                layers[0],
                Tensor(np.zeros((3, 5))),
                Tensor(np.zeros((3, 5))),
                Tensor(np.zeros((3, 3))),
                Tensor(np.zeros((3, 3))),
            )


class TestTransblock:
    def test_zero_weights_pure_residual(self, rng):
        layers, store = make_params()
        for _, t in store.items():
            t.data = np.zeros_like(t.data)
        x = rng.normal(size=(5, 8))
        out, _ = transblock(layers, Tensor(x), Tensor(rng.uniform(size=(5, 3))))
        np.testing.assert_array_equal(out.data, x)

    def test_single_point_reduces_to_ffn_chain(self, rng):
        layers, _ = make_params(layers=2)
        x = rng.normal(size=(1, 8))
        coords = rng.uniform(size=(1, 3))
        out, _ = transblock(layers, Tensor(x), Tensor(coords))
        expected, _ = naive_transblock(layers, x, coords)
        np.testing.assert_allclose(out.data, expected, atol=1e-9)

    def test_two_layer_composition_matches_chained_singles(self, rng):
        layers, _ = make_params(layers=2)
        x = Tensor(rng.normal(size=(6, 8)))
        coords = Tensor(rng.uniform(size=(6, 3)))
        full, recs = transblock(layers, x, coords)
        step1, _ = transblock(layers[:1], x, coords)
        step2, _ = transblock(layers[1:], step1, coords)
        np.testing.assert_allclose(full.data, step2.data, atol=1e-12)
        assert len(recs) == 2

    def test_cross_attention_matches_oracle(self, rng):
        layers, _ = make_params(layers=2, seed=9)
        q = rng.normal(size=(4, 8))
        kv = rng.normal(size=(7, 8))
        xq = rng.uniform(size=(4, 3))
        xk = rng.uniform(size=(7, 3))
        out, _ = transblock(layers, Tensor(q), Tensor(xq), kv_feats=Tensor(kv), kv_coords=Tensor(xk))
        expected, _ = naive_transblock(layers, q, xq, kv_feats=kv, kv_coords=xk)
        np.testing.assert_allclose(out.data, expected, atol=1e-8)

    def test_empty_stack_rejected(self, rng):
        with pytest.raises(ValueError):
            transblock([], Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 3))))


class TestLayerNorm:
    def test_normalizes_rows(self, rng):
        from pointformer.attention import layernorm

        x = Tensor(rng.normal(size=(6, 8)) * 3 + 2)
        out = layernorm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_pre_norm_stack_gradients(self, rng):
        from pointformer.gradcheck import max_relative_error
        from pointformer.tensor import tmean

        store = ParamStore(8, dtype=np.float64)
        pe = make_pe_net(store, "pe", 2, hidden=4)
        layers = [
            AttentionParams.create(store, f"l{i}", 8, 2, pe_net=pe, layernorm=True)
            for i in range(2)
        ]
        feats = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        coords = Tensor(rng.uniform(size=(5, 3)))
        c = Tensor(rng.normal(size=(5, 8)))

        def loss():
            out, _ = transblock(layers, feats, coords)
            return tmean(out * c)

        errs = max_relative_error(loss, [("feats", feats)] + list(store.items()), max_coords=4)
        assert errs["__max__"] < 1e-4


class TestLinformer:
    def test_dim_rule(self):
        assert linformer_dim(4096, 8) == 512
        assert linformer_dim(100, 8) == 13
        assert linformer_dim(7, 1) == 7

    def test_selector_rows_pick_keys(self, rng):
        x = rng.normal(size=(6, 4))
        e = np.zeros((2, 6))
        e[0, 3] = 1.0
        e[1, 1] = 1.0
        out = linformer_project(Tensor(e), Tensor(x))
        np.testing.assert_array_equal(out.data, x[[3, 1]])

    def test_projection_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            linformer_project(Tensor(np.zeros((2, 5))), Tensor(np.zeros((6, 4))))

    def test_r1_identity_matches_full_mode(self, rng):
        layers, _ = make_params(seed=4)
        p = layers[0]
        p.linformer = identity_linformer(9)
        f = Tensor(rng.normal(size=(9, 8)))
        x = Tensor(rng.uniform(size=(9, 3)))
        full, _ = multi_head_attention(p, f, f, x, x, mode="full")
        low, rec = multi_head_attention(p, f, f, x, x, mode="linformer")
        np.testing.assert_allclose(low.data, full.data, atol=1e-5)
        assert rec.mode == "linformer"

    def test_padded_short_input_matches_full_for_identity(self, rng):
        # n_k < n_max with identity projection: zero-padded keys receive the
        # zero bias and zero values, so only real keys carry weight mass
        layers, _ = make_params(seed=5, pe=False)
        p = layers[0]
        p.linformer = identity_linformer(12)
        f = Tensor(rng.normal(size=(7, 8)))
        x = Tensor(rng.uniform(size=(7, 3)))
        low, rec = multi_head_attention(p, f, f, x, x, mode="linformer")
        assert rec.weights.shape == (2, 7, 12)
        assert np.isfinite(low.data).all()

    def test_n4096_r8_projected_extent(self):
        # score matrix is n x 512 after projection
        store = ParamStore(0, dtype=np.float32)
        proj = make_linformer(store, "lin", n_max=4096, r=8)
        assert proj.k_proj == 512
        params = AttentionParams.create(store, "attn", 8, 1, pe_net=None, linformer=proj)
        rng = np.random.default_rng(0)
        f = Tensor(rng.normal(size=(4096, 8)).astype(np.float32))
        x = Tensor(rng.uniform(size=(4096, 3)).astype(np.float32))
        with no_grad():
            _, record = multi_head_attention(params, f, f, x, x, mode="linformer")
        assert record.weights.shape == (1, 4096, 512)

    def test_too_many_keys_rejected(self, rng):
        layers, _ = make_params(linformer=(6, 2))
        f = Tensor(rng.normal(size=(8, 8)))
        x = Tensor(rng.uniform(size=(8, 3)))
        with pytest.raises(ValueError, match="at most"):
            multi_head_attention(layers[0], f, f, x, x, mode="linformer")

    def test_score_alloc_accounting(self, rng):
        layers, _ = make_params(seed=6, heads=2, linformer=(16, 4), dtype=np.float32)
        p = layers[0]
        f = Tensor(rng.normal(size=(16, 8)).astype(np.float32))
        x = Tensor(rng.uniform(size=(16, 3)).astype(np.float32))
        stats_full: dict = {}
        stats_low: dict = {}
        multi_head_attention(p, f, f, x, x, mode="full", alloc_stats=stats_full)
        multi_head_attention(p, f, f, x, x, mode="linformer", alloc_stats=stats_low)
        assert stats_full["peak_score_bytes"] == 2 * 16 * 16 * 4
        assert stats_low["peak_score_bytes"] == 2 * 16 * 4 * 4
