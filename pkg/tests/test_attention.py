import csv

import numpy as np
import pytest

from saltformer import tensor as T
from saltformer.attention import (
    DENSE,
    PARTITIONED,
    AttentionWeights,
    block_diagonal_from_packed,
    build_block_diagonal,
    full_mha,
    linformer_attention,
    lpp_mha,
    lpp_project,
)
from saltformer.errors import ConfigError, DimensionError
from saltformer.jets import partition_bounds
from saltformer.tensor import Tensor


def make_weights(rng, n, d=8, heads=2, p=2, e_mode=PARTITIONED, f_mode=PARTITIONED, filters=(1, 3),
                 rule="floor", dtype=np.float64, share=False, scale=0.5):
    t = lambda *s: Tensor(rng.normal(scale=scale, size=s).astype(dtype))
    bounds = partition_bounds(n, p, rule)
    width = max(b - a for a, b in bounds)
    e = t(heads, p, width if e_mode == PARTITIONED else n)
    f = e if share else t(heads, p, width if f_mode == PARTITIONED else n)
    return AttentionWeights(
        heads=heads,
        w_q=t(d, d), w_k=t(d, d), w_v=t(d, d), w_o=t(d, d),
        b_q=t(d), b_k=t(d), b_v=t(d), b_o=t(d),
        e=e, f=f, e_mode=e_mode, f_mode=f_mode, bounds=bounds,
        kernels=[t(h, p) for h in filters],
        conv_bias=t(len(filters)) if filters else None,
    )


def np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def naive_heads(x, w):
    """Per-head Q, K, V by explicit loops."""
    n, d = x.shape
    dh = w.d_head
    proj = lambda W, b: np.array([[sum(x[i, c] * W.data[c, j] for c in range(d)) + b.data[j] for j in range(d)]
                                  for i in range(n)])
    q, k, v = proj(w.w_q, w.b_q), proj(w.w_k, w.b_k), proj(w.w_v, w.b_v)
    split = lambda m: [m[:, h * dh:(h + 1) * dh] for h in range(w.heads)]
    return split(q), split(k), split(v)


def naive_output(heads_out, w):
    cat = np.concatenate(heads_out, axis=1)
    return cat @ w.w_o.data + w.b_o.data


def naive_full(x, w):
    qs, ks, vs = naive_heads(x, w)
    outs = []
    for q, k, v in zip(qs, ks, vs):
        n = q.shape[0]
        out = np.zeros_like(v)
        for i in range(n):
            s = np.array([sum(q[i, c] * k[j, c] for c in range(q.shape[1])) for j in range(n)]) / np.sqrt(q.shape[1])
            a = np.exp(s - s.max())
            a /= a.sum()
            for j in range(n):
                out[i] += a[j] * v[j]
        outs.append(out)
    return naive_output(outs, w)


def naive_conv(x, kernels, biases):
    out = np.zeros_like(x)
    n, p = x.shape[-2:]
    for k, b in zip(kernels, biases):
        h, wd = k.shape
        top, left = (h - 1) // 2, (wd - 1) // 2
        for i in range(n):
            for j in range(p):
                acc = b
                for a in range(h):
                    for c in range(wd):
                        r, s = i + a - top, j + c - left
                        if 0 <= r < n and 0 <= s < p:
                            acc = acc + k[a, c] * x[..., r, s]
                out[..., i, j] += acc
    return out / len(kernels)


def naive_lpp(x, w):
    """Composition of per-op oracles: partition slicing, matmul, conv, softmax."""
    qs, ks, vs = naive_heads(x, w)
    outs, pre = [], []
    for h, (q, k, v) in enumerate(zip(qs, ks, vs)):
        kp = np.stack([w.e.data[h, i, : b - a] @ k[a:b] for i, (a, b) in enumerate(w.bounds)])
        vp = np.stack([w.f.data[h, i, : b - a] @ v[a:b] for i, (a, b) in enumerate(w.bounds)])
        pre.append((q @ kp.T / np.sqrt(q.shape[1]), vp))
    logits = np.stack([p[0] for p in pre])
    mixed = naive_conv(logits, [k.data for k in w.kernels], w.conv_bias.data) if w.kernels else logits
    attn = np_softmax(mixed)
    outs = [attn[h] @ pre[h][1] for h in range(w.heads)]
    return naive_output(outs, w), logits


class TestFullAttention:
    def test_single_token_is_value_projection(self):
        rng = np.random.default_rng(0)
        w = make_weights(rng, 1, p=1)
        x = rng.normal(size=(1, 8))
        want = (x @ w.w_v.data + w.b_v.data) @ w.w_o.data + w.b_o.data
        np.testing.assert_allclose(full_mha(Tensor(x), w).data, want, atol=1e-14)

    def test_shape(self):
        rng = np.random.default_rng(1)
        w = make_weights(rng, 7)
        assert full_mha(Tensor(rng.normal(size=(7, 8))), w).shape == (7, 8)
        assert full_mha(Tensor(rng.normal(size=(3, 7, 8))), w).shape == (3, 7, 8)

    def test_naive_loop_oracle(self):
        rng = np.random.default_rng(2)
        w = make_weights(rng, 4)
        x = rng.normal(size=(4, 8))
        assert np.abs(full_mha(Tensor(x), w).data - naive_full(x, w)).max() < 1e-10

    def test_feature_mismatch(self):
        rng = np.random.default_rng(3)
        with pytest.raises(DimensionError):
            full_mha(Tensor(rng.normal(size=(4, 5))), make_weights(rng, 4))


class TestLinformer:
    def test_identity_projection_is_full_attention(self):
        rng = np.random.default_rng(0)
        n = 6
        w = make_weights(rng, n, p=n)
        x = Tensor(rng.normal(size=(n, 8)))
        eye = Tensor(np.eye(n))
        diff = linformer_attention(x, w, eye, eye).data - full_mha(x, w).data
        assert np.abs(diff).max() < 1e-10

    def test_dense_algebra_oracle(self):
        rng = np.random.default_rng(1)
        n, p = 6, 2
        w = make_weights(rng, n, p=p)
        x = rng.normal(size=(n, 8))
        e, f = rng.normal(size=(p, n)), rng.normal(size=(p, n))
        qs, ks, vs = naive_heads(x, w)
        outs = [np_softmax(q @ (e @ k).T / np.sqrt(4)) @ (f @ v) for q, k, v in zip(qs, ks, vs)]
        got = linformer_attention(Tensor(x), w, Tensor(e), Tensor(f)).data
        assert np.abs(got - naive_output(outs, w)).max() < 1e-12

    def test_shape(self):
        rng = np.random.default_rng(2)
        w = make_weights(rng, 10, e_mode=DENSE, f_mode=DENSE)
        assert linformer_attention(Tensor(rng.normal(size=(10, 8))), w).shape == (10, 8)

    def test_width_mismatch(self):
        rng = np.random.default_rng(3)
        w = make_weights(rng, 10, e_mode=DENSE, f_mode=DENSE)
        with pytest.raises(DimensionError):
            linformer_attention(Tensor(rng.normal(size=(9, 8))), w)


class TestLppProject:
    def test_singleton_partitions(self):
        rng = np.random.default_rng(0)
        seq = rng.normal(size=(5, 3))
        r = rng.normal(size=5)
        bounds = partition_bounds(5, 5)
        out = lpp_project(Tensor(seq), bounds, [Tensor(r[i:i + 1]) for i in range(5)])
        np.testing.assert_allclose(out.data, np.diag(r) @ seq, atol=1e-15)

    def test_zero_input(self):
        bounds = partition_bounds(6, 2)
        out = lpp_project(Tensor(np.zeros((6, 4))), bounds, [Tensor(np.ones(3)), Tensor(np.ones(3))])
        np.testing.assert_array_equal(out.data, 0.0)

    def test_matches_block_diagonal(self):
        rng = np.random.default_rng(1)
        seq = rng.normal(size=(11, 4))
        bounds = partition_bounds(11, 3)
        rows = [rng.normal(size=b - a) for a, b in bounds]
        got = lpp_project(Tensor(seq), bounds, [Tensor(r) for r in rows]).data
        want = build_block_diagonal(bounds, rows).data @ seq
        assert np.abs(got - want).max() < 1e-12

    def test_each_row_sees_only_its_partition(self):
        rng = np.random.default_rng(2)
        seq = rng.normal(size=(8, 2))
        bounds = partition_bounds(8, 4)
        rows = [Tensor(rng.normal(size=2)) for _ in bounds]
        base = lpp_project(Tensor(seq), bounds, rows).data
        seq2 = seq.copy()
        seq2[4:6] += 10.0
        moved = lpp_project(Tensor(seq2), bounds, rows).data
        changed = np.any(base != moved, axis=1)
        assert changed.tolist() == [False, False, True, False]

    def test_row_width_mismatch(self):
        with pytest.raises(ConfigError):
            lpp_project(Tensor(np.ones((4, 2))), partition_bounds(4, 2), [Tensor(np.ones(2)), Tensor(np.ones(3))])

    def test_row_count_mismatch(self):
        with pytest.raises(ConfigError):
            lpp_project(Tensor(np.ones((4, 2))), partition_bounds(4, 2), [Tensor(np.ones(2))])

    def test_empty_partition_gives_zero_row(self):
        bounds = partition_bounds(9, 4, "ceil")
        rows = [Tensor(np.ones(3))] * 3 + [None]
        out = lpp_project(Tensor(np.ones((9, 2))), bounds, rows)
        np.testing.assert_array_equal(out.data, [[3, 3], [3, 3], [3, 3], [0, 0]])


class TestBlockDiagonal:
    def test_singletons_give_identity(self):
        m = build_block_diagonal(partition_bounds(4, 4), [np.ones(1)] * 4)
        np.testing.assert_array_equal(m.data, np.eye(4))

    def test_direct_construction(self):
        m = build_block_diagonal(partition_bounds(4, 2), [np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        np.testing.assert_array_equal(m.data, [[1, 2, 0, 0], [0, 0, 3, 4]])

    def test_shape_check(self):
        with pytest.raises(DimensionError):
            build_block_diagonal(partition_bounds(4, 2), [np.ones(3), np.ones(2)])


def no_conv(w):
    w.kernels = []
    w.conv_bias = None
    return w


class TestLppAttention:
    def test_delta_kernel_matches_no_conv_bitwise(self):
        rng = np.random.default_rng(0)
        for p in (1, 2, 3, 4):
            w = make_weights(rng, 12, p=p, filters=(1,))
            delta = np.zeros((1, p))
            delta[0, (p - 1) // 2] = 1.0
            w.kernels = [Tensor(delta)]
            w.conv_bias = Tensor(np.zeros(1))
            x = Tensor(rng.normal(size=(3, 12, 8)))
            with_delta, tr = lpp_mha(x, w)
            plain, _ = lpp_mha(x, no_conv(w))
            np.testing.assert_array_equal(with_delta.data, plain.data)
            np.testing.assert_array_equal(tr.logits_pre_conv, tr.logits_post_conv)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        w = make_weights(rng, 10, p=3, filters=(1, 3, 5))
        out, tr = lpp_mha(Tensor(rng.normal(size=(10, 8))), w)
        assert out.shape == (10, 8)
        assert tr.weights_post_softmax.shape == (2, 10, 3)
        assert np.abs(tr.weights_post_softmax.sum(-1) - 1).max() < 1e-9

    def test_composition_oracle(self):
        rng = np.random.default_rng(2)
        w = make_weights(rng, 8, d=8, heads=2, p=2, filters=(1, 3, 5))
        x = rng.normal(size=(8, 8))
        want, logits = naive_lpp(x, w)
        got, tr = lpp_mha(Tensor(x), w)
        assert np.abs(got.data - want).max() < 1e-10
        assert np.abs(tr.logits_pre_conv - logits).max() < 1e-12

    def test_block_diagonal_equivalence_100_instances(self):
        # Weights at the spread of the model initialisation, uniform(+-1/sqrt(d)).
        rng = np.random.default_rng(3)
        worst64 = worst32 = 0.0
        for _ in range(100):
            n = int(rng.integers(4, 33))
            p = int(rng.choice([1, 2, 4]))
            for dtype in (np.float64, np.float32):
                w = no_conv(make_weights(rng, n, p=p, filters=(), dtype=dtype, scale=0.2))
                x = Tensor(rng.normal(size=(2, n, 8)).astype(dtype))
                lpp, _ = lpp_mha(x, w)
                e = Tensor(block_diagonal_from_packed(w.e, w.bounds, n))
                f = Tensor(block_diagonal_from_packed(w.f, w.bounds, n))
                lin = linformer_attention(x, w, e, f)
                diff = np.abs(lpp.data.astype(np.float64) - lin.data).max()
                if dtype == np.float64:
                    worst64 = max(worst64, diff)
                else:
                    worst32 = max(worst32, diff)
        assert worst64 < 1e-12
        assert worst32 < 1e-6

    def test_build_block_diagonal_path_equals_linformer(self):
        rng = np.random.default_rng(4)
        n, p = 6, 2
        w = no_conv(make_weights(rng, n, heads=1, d=4, p=p, filters=()))
        x = Tensor(rng.normal(size=(n, 4)))
        e = build_block_diagonal(w.bounds, [w.e.data[0, i, : b - a] for i, (a, b) in enumerate(w.bounds)])
        f = build_block_diagonal(w.bounds, [w.f.data[0, i, : b - a] for i, (a, b) in enumerate(w.bounds)])
        lpp, _ = lpp_mha(x, w)
        assert np.abs(lpp.data - linformer_attention(x, w, e, f).data).max() < 1e-12

    def test_partition_locality(self):
        # perturbing the keys of partition j leaves every other logit column untouched
        rng = np.random.default_rng(5)
        n, p = 12, 4
        w = make_weights(rng, n, p=p)
        bounds = w.bounds
        q = Tensor(rng.normal(size=(2, n, 4)))
        k = rng.normal(size=(2, n, 4))
        rows = [w.e[:, i, : b - a] for i, (a, b) in enumerate(bounds)]
        logits = lambda keys: T.matmul(q, T.transpose(lpp_project(Tensor(keys), bounds, rows), (0, 2, 1))).data
        base = logits(k)
        for j, (a, b) in enumerate(bounds):
            k2 = k.copy()
            k2[:, a:b] = 0.0
            changed = np.any(logits(k2) != base, axis=(0, 1))
            assert changed.tolist() == [i == j for i in range(p)]

    def test_padding_changes_only_pad_partitions(self):
        rng = np.random.default_rng(6)
        n, p = 16, 4
        w = make_weights(rng, n, p=p)
        x = rng.normal(size=(n, 8))
        x_short = x.copy()
        x_short[13:] = 0.0  # three more pad rows, all inside the last partition
        _, full = lpp_mha(Tensor(x), w)
        _, short = lpp_mha(Tensor(x_short), w)
        keep_rows = slice(0, 13)
        diff = full.logits_pre_conv[:, keep_rows] != short.logits_pre_conv[:, keep_rows]
        assert diff.any(axis=(0, 1)).tolist() == [False, False, False, True]


class TestAblations:
    def test_no_conv_no_partition_is_linformer(self):
        rng = np.random.default_rng(0)
        w = no_conv(make_weights(rng, 10, e_mode=DENSE, f_mode=DENSE, filters=()))
        x = Tensor(rng.normal(size=(10, 8)))
        a, _ = lpp_mha(x, w)
        np.testing.assert_allclose(a.data, linformer_attention(x, w).data, atol=1e-14)

    def test_value_only_keeps_key_logits(self):
        rng = np.random.default_rng(1)
        dense_w = make_weights(rng, 10, e_mode=DENSE, f_mode=DENSE)
        value_only = AttentionWeights(**{**dense_w.__dict__})
        value_only.f_mode = PARTITIONED
        value_only.f = Tensor(rng.normal(size=(2, 2, 5)))
        x = Tensor(rng.normal(size=(10, 8)))
        _, t1 = lpp_mha(x, dense_w)
        _, t2 = lpp_mha(x, value_only)
        np.testing.assert_array_equal(t1.logits_pre_conv, t2.logits_pre_conv)

    def test_shared_projection(self):
        rng = np.random.default_rng(2)
        w = make_weights(rng, 8, share=True)
        assert w.e is w.f
        out, _ = lpp_mha(Tensor(rng.normal(size=(8, 8))), w)
        assert out.shape == (8, 8)


class TestTraceExport:
    def test_csv_files(self, tmp_path):
        rng = np.random.default_rng(0)
        w = make_weights(rng, 6, p=2)
        _, tr = lpp_mha(Tensor(rng.normal(size=(6, 8))), w)
        paths = tr.write_csv(tmp_path)
        assert len(paths) == 2 * 3
        with open(tmp_path / "attn_head1_post_softmax.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["head1_post_softmax_row", "col0", "col1"]
        vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        np.testing.assert_array_equal(vals, tr.weights_post_softmax[1])
