import numpy as np
import pytest

import cmdhar.tensor as T
from cmdhar.expansion import (
    CardinalityConfig,
    GatingNetwork,
    GroupExpansion,
    gating_logits,
    group_sum,
    split_attention,
    split_weights,
)
from cmdhar.tensor import ShapeError, Tensor, grad_check


def cfg(channels=8, groups=2, radix=2, hidden=4):
    return CardinalityConfig(channels=channels, groups=groups, radix=radix,
                             gating_hidden=hidden)


# ---------------------------------------------------------------------------
# group_sum


def group_sum_oracle(x: np.ndarray, k: int, r: int, d: int) -> list[np.ndarray]:
    out = []
    for g in range(k):
        acc = np.zeros(x.shape[:-1] + (d,))
        for i in range(r):
            block = g * r + i
            acc += x[..., block * d:(block + 1) * d]
        out.append(acc)
    return out


def test_group_sum_radix_one_is_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 8))
    out = group_sum(Tensor(x), cfg(channels=8, groups=2, radix=1))
    np.testing.assert_array_equal(out[0].data, x[:, :4])
    np.testing.assert_array_equal(out[1].data, x[:, 4:])


def test_group_sum_single_group_adds_blocks():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    x = np.concatenate([a, b], axis=1)
    out = group_sum(Tensor(x), cfg(channels=3, groups=1, radix=2))
    assert len(out) == 1
    np.testing.assert_allclose(out[0].data, a + b, rtol=1e-15)


def test_group_sum_matches_index_loop_oracle():
    c = cfg(channels=8, groups=2, radix=3)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(7, c.subgroups * c.group_width))
    got = group_sum(Tensor(x), c)
    want = group_sum_oracle(x, 2, 3, c.group_width)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g.data, w, rtol=1e-14)


def test_group_sum_channel_mismatch_errors():
    with pytest.raises(ShapeError):
        group_sum(Tensor(np.zeros((4, 7))), cfg(channels=8, groups=2, radix=2))


def test_config_divisibility_enforced():
    with pytest.raises(ValueError):
        CardinalityConfig(channels=7, groups=2, radix=1)
    with pytest.raises(ValueError):
        CardinalityConfig(channels=8, groups=2, radix=0)


# ---------------------------------------------------------------------------
# gating_logits


def test_gating_zero_parameters_give_zero_logits():
    c = cfg(channels=8, groups=2, radix=3, hidden=5)
    d = c.group_width
    zeros = lambda *s: Tensor(np.zeros(s))
    out = gating_logits(Tensor(np.ones(d)), zeros(d, 5), zeros(5),
                        zeros(5, 3 * d), zeros(3 * d), c)
    assert out.shape == (3, d)
    np.testing.assert_array_equal(out.data, 0.0)


def test_equal_logits_give_uniform_split_weights():
    c = cfg(radix=4)
    logits = Tensor(np.full((4, c.group_width), 1.7))
    w = split_weights(logits, 4)
    np.testing.assert_allclose(w.data, 0.25, rtol=1e-12)


def test_gating_matches_dense_layer_oracle():
    c = cfg(channels=8, groups=2, radix=2, hidden=6)
    d = c.group_width
    rng = np.random.default_rng(3)
    w1, b1 = rng.normal(size=(d, 6)), rng.normal(size=6)
    w2, b2 = rng.normal(size=(6, 2 * d)), rng.normal(size=2 * d)
    s = rng.normal(size=d)
    got = gating_logits(Tensor(s), Tensor(w1), Tensor(b1), Tensor(w2), Tensor(b2), c)
    want = (np.maximum(s @ w1 + b1, 0.0) @ w2 + b2).reshape(2, d)
    np.testing.assert_allclose(got.data, want, rtol=1e-12)


def test_gating_rejects_bad_descriptor_width():
    c = cfg()
    net = GatingNetwork("g", c, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros(c.group_width + 1)))


# ---------------------------------------------------------------------------
# split_attention


def eq1_oracle(splits: list[np.ndarray], logits: np.ndarray, radix: int) -> np.ndarray:
    """Brute-force weighted sum with explicitly computed softmax weights."""
    d = logits.shape[-1]
    out = np.zeros_like(splits[0])
    for c in range(d):
        col = logits[:, c]
        if radix > 1:
            e = np.exp(col - col.max())
            a = e / e.sum()
        else:
            a = 1.0 / (1.0 + np.exp(-col))
        for i in range(radix):
            out[:, c] += a[i] * splits[i][:, c]
    return out


def test_split_attention_radix_one_sigmoid_zero_logits():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 4))
    out = split_attention([Tensor(x)], Tensor(np.zeros((1, 4))), 1)
    np.testing.assert_allclose(out.data, 0.5 * x, rtol=1e-15)


def test_split_attention_equal_logits_averages():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    out = split_attention([Tensor(a), Tensor(b)], Tensor(np.zeros((2, 4))), 2)
    np.testing.assert_allclose(out.data, (a + b) / 2, rtol=1e-12)


def test_split_attention_matches_brute_force_oracle():
    rng = np.random.default_rng(6)
    splits = [rng.normal(size=(5, 3)) for _ in range(3)]
    logits = rng.normal(size=(3, 3))
    out = split_attention([Tensor(s) for s in splits], Tensor(logits), 3)
    np.testing.assert_allclose(out.data, eq1_oracle(splits, logits, 3), rtol=1e-12)


def test_split_attention_rejects_bad_radix():
    with pytest.raises(ValueError):
        split_weights(Tensor(np.zeros((1, 4))), 0)


def test_split_weights_sum_to_one_many_configs():
    rng = np.random.default_rng(7)
    for trial in range(200):
        radix = int(rng.integers(2, 5))
        d = int(rng.integers(1, 9))
        w = split_weights(Tensor(rng.normal(size=(radix, d)) * 10), radix)
        np.testing.assert_allclose(w.data.sum(axis=0), 1.0, atol=1e-6)
        assert (w.data >= 0).all()


def test_split_weights_radix_one_in_open_interval():
    rng = np.random.default_rng(8)
    for trial in range(50):
        w = split_weights(Tensor(rng.normal(size=(1, 6)) * 5), 1)
        assert ((w.data > 0) & (w.data < 1)).all()


def test_per_channel_logit_shift_leaves_weights_unchanged():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(3, 5))
    shifted = logits.copy()
    shifted[:, 2] += 13.7  # constant shift on one channel's logits
    a = split_weights(Tensor(logits), 3).data
    b = split_weights(Tensor(shifted), 3).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_group_expansion_time_permutation_equivariance():
    c = cfg(channels=8, groups=1, radix=2)
    block = GroupExpansion("g0", 3, c, np.random.default_rng(10))
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    base = block(Tensor(x)).data
    permuted = block(Tensor(x[perm])).data
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


def test_group_expansion_gradients_pass_grad_check():
    c = cfg(channels=8, groups=1, radix=2, hidden=4)
    block = GroupExpansion("g0", 3, c, np.random.default_rng(12))

    def f(x):
        return T.sum_(T.tanh(block(x.reshape(4, 3))))

    report = grad_check(f, Tensor(np.random.default_rng(13).normal(size=12)),
                        step=1e-5, tolerance=1e-4)
    assert report.ok, report.max_rel_error

    # and through the gating parameters themselves, by central differences
    x = Tensor(np.random.default_rng(14).normal(size=(4, 3)))
    w1 = block.gating.w1
    base = w1.data.copy()
    w1.zero_grad()
    out = T.sum_(T.tanh(block(x)))
    T.backward(out)
    analytic = w1.grad.copy()
    numeric = np.zeros_like(base)
    eps = 1e-5
    with T.no_grad():
        for i in range(base.size):
            flat = base.reshape(-1).copy()
            flat[i] += eps
            w1.data = flat.reshape(base.shape)
            hi = float(T.sum_(T.tanh(block(x))).data)
            flat[i] -= 2 * eps
            w1.data = flat.reshape(base.shape)
            lo = float(T.sum_(T.tanh(block(x))).data)
            numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    w1.data = base
    rel = np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    assert rel.max() < 1e-4


def test_group_expansion_batched_matches_single():
    c = cfg(channels=8, groups=1, radix=2)
    block = GroupExpansion("g0", 3, c, np.random.default_rng(15))
    rng = np.random.default_rng(16)
    batch = rng.normal(size=(3, 5, 3))
    batched = block(Tensor(batch)).data
    for b in range(3):
        single = block(Tensor(batch[b])).data
        np.testing.assert_allclose(batched[b], single, atol=1e-12)
