import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from meshrom import autodiff as ad
from meshrom.autodiff import Tensor
from meshrom.errors import FormatError, ValidationError
from meshrom.nn import MlpParams, named_parameters
from meshrom.temporal import (AttentionHeadParams, LatentSequence, continue_rollout, init_temporal, mhat_step,
                              multi_head_attention, predict_next, read_latent_sequence, rollout,
                              rollout_tensors, sequence_predictions, attention_weights, window_indices,
                              write_latent_sequence)

from conftest import fd_relative_error


def _linear(w, b):
    w = np.atleast_2d(np.asarray(w, float))
    return MlpParams([w.shape[0], w.shape[1]], [Tensor(w)], [Tensor(np.asarray(b, float))])


def _model(d=8, heads=2, context=4, seed=0, **kw):
    kw = {"n_blocks": 2, "qk_dim": 4, "mlp_hidden": 8, "mlp_layers": 3, **kw}
    return init_temporal(d, 1, n_heads=heads, context_length=context, seed=seed, **kw)


def _randomise_head(p, rng):
    # the zero-initialised output layer would make every step the identity
    for t in named_parameters(p.head).values():
        t.data = rng.normal(scale=0.3, size=t.shape)


def test_zero_query_key_gives_uniform_weights(rng):
    zero = _linear(np.zeros((3, 2)), np.zeros(2))
    head = AttentionHeadParams(zero, zero, _linear(np.eye(3), np.zeros(3)))
    seq = LatentSequence(rng.normal(size=(5, 3)), [0.0])
    for i in range(5):
        np.testing.assert_allclose(attention_weights(seq, i, head), np.full(i + 1, 1 / (i + 1)), atol=1e-15)
    assert attention_weights(seq, 0, head).tolist() == [1.0]


def test_two_token_logit_example():
    # query is constant 1, key reads the first token coordinate, so logits are (0, ln 3)
    q = _linear(np.zeros((2, 1)), [1.0])
    k = _linear([[1.0], [0.0]], [0.0])
    head = AttentionHeadParams(q, k, _linear(np.eye(2), np.zeros(2)))
    seq = LatentSequence([[0.0, 0.0], [math.log(3.0), 0.0]], [0.0])
    np.testing.assert_allclose(attention_weights(seq, 1, head, scaled=False), [0.25, 0.75], atol=1e-15)


@given(st.lists(st.integers(-40, 40), min_size=1, max_size=8), st.integers(-1000, 1000))
def test_logit_shift_is_bit_identical(ticks, shift):
    # multiples of 1/8 keep the shifted logits exact
    x = np.array(ticks, float)[None, :] / 8
    assert np.array_equal(ad.softmax(x).data, ad.softmax(x + shift).data)


def test_heads_concatenate_to_token_width(rng):
    p = _model(d=16, heads=8)
    out, w = multi_head_attention(Tensor(rng.normal(size=(3, 16))), p.blocks[0].attn)
    assert out.shape == (3, 16) and w.shape == (8, 3, 3)


@given(st.integers(0, 10_000), st.integers(1, 7))
def test_weights_are_causal_and_normalised(seed, t):
    rng = np.random.default_rng(seed)
    p = _model(d=8, heads=2, seed=seed % 5)
    _, w = multi_head_attention(Tensor(rng.normal(size=(t, 8))), p.blocks[0].attn)
    w = w.data
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(w[:, np.triu_indices(t, 1)[0], np.triu_indices(t, 1)[1]] == 0.0)


def test_two_head_toy_matches_oracle(rng):
    p = _model(d=4, heads=2, mlp_layers=2, mlp_hidden=3, qk_dim=2)
    a = p.blocks[0].attn
    x = rng.normal(size=(2, 4))
    out, _ = multi_head_attention(Tensor(x), a)

    def mlp(m, h, z):
        z = np.maximum(z @ m.weights[0].data[h] + m.biases[0].data[h, 0], 0)
        return z @ m.weights[1].data[h] + m.biases[1].data[h, 0]

    ref = []
    for h in range(2):
        q, k, v = mlp(a.query, h, x), mlp(a.key, h, x), mlp(a.value, h, x)
        rows = []
        for i in range(2):
            s = np.array([q[i] @ k[j] / math.sqrt(2) for j in range(i + 1)])
            e = np.exp(s - s.max())
            rows.append((e / e.sum()) @ v[: i + 1])
        ref.append(np.array(rows))
    np.testing.assert_allclose(out.data, np.concatenate(ref, axis=1), rtol=1e-12, atol=1e-14)


def test_window_indices():
    assert list(window_indices(0, 3)) == [0]
    assert list(window_indices(1, 3)) == [0, 1]
    assert list(window_indices(2, 3)) == [1, 2]
    assert list(window_indices(5, 3)) == [4, 5]


def test_future_tokens_do_not_change_earlier_outputs(rng):
    p = _model(context=6)
    _randomise_head(p, rng)
    z = rng.normal(size=(5, 8))
    a = sequence_predictions(z, [0.3], p)
    z2 = z.copy()
    z2[3:] = rng.normal(size=(2, 8))
    b = sequence_predictions(z2, [0.3], p)
    assert np.array_equal(a[:3], b[:3])
    assert not np.array_equal(a[3:], b[3:])


def test_truncated_history_gives_same_prediction(rng):
    p = _model(context=4)
    _randomise_head(p, rng)
    hist = rng.normal(size=(9, 8))
    full = predict_next(hist, [0.1], p)
    short = mhat_step(LatentSequence(hist[-3:], [0.1]), p)
    assert np.array_equal(full, short)
    # anything older than the window is ignored
    hist[:6] = 0.0
    assert np.array_equal(predict_next(hist, [0.1], p), full)


def test_zero_initialised_head_predicts_persistence(rng):
    p = _model()
    z0 = rng.normal(size=8)
    seq = rollout(z0, [0.5], 3, p)
    assert np.array_equal(seq.tokens, np.tile(z0, (4, 1)))


def test_single_step_rollout(rng):
    p = _model()
    _randomise_head(p, rng)
    z0 = rng.normal(size=8)
    seq = rollout(z0, [0.5], 1, p, dt=0.1, t0=2.0)
    assert len(seq) == 2 and np.array_equal(seq.tokens[0], z0)
    assert np.array_equal(seq.tokens[1], predict_next(z0[None, :], [0.5], p))
    np.testing.assert_allclose(seq.times, [2.0, 2.1])
    with pytest.raises(ValidationError):
        rollout(z0, [0.5], 0, p)


def test_rollout_matches_stepwise_prediction(rng):
    p = _model(context=3)
    _randomise_head(p, rng)
    seq = rollout(rng.normal(size=8), [0.2], 6, p)
    for j in range(1, 7):
        np.testing.assert_array_equal(seq.tokens[j], predict_next(seq.tokens[:j], [0.2], p))


def test_continue_rollout_extends_history(rng):
    p = _model(context=3)
    _randomise_head(p, rng)
    z0 = Tensor(rng.normal(size=(1, 8)))
    full = rollout_tensors(z0, [0.2], 4, p)
    tail = continue_rollout(full[:2], [0.2], 3, p)
    for a, b in zip(full[2:], tail):
        assert np.array_equal(a.data, b.data)


def test_two_step_rollout_loss_gradient(rng):
    p = _model(d=4, heads=2, context=3, qk_dim=2, mlp_hidden=4)
    _randomise_head(p, rng)
    for name, t in named_parameters(p).items():
        if ".biases." in name:
            t.data = rng.normal(scale=0.1, size=t.shape)
    z0 = rng.normal(size=(1, 4))
    targets = rng.normal(size=(2, 4))
    params = list(named_parameters(p).values())

    def loss():
        zs = rollout_tensors(Tensor(z0), [0.4], 2, p)
        return ad.add(ad.mse_loss(zs[1], targets[:1]), ad.mse_loss(zs[2], targets[1:]))

    assert fd_relative_error(loss, params, max_entries=12) < 1e-4


def test_latent_file_roundtrip(tmp_path, rng):
    seq = LatentSequence(rng.normal(size=(6, 5)), [1.5, -2.0], dt=0.25, t0=1.0)
    write_latent_sequence(seq, tmp_path / "z.glzt")
    back = read_latent_sequence(tmp_path / "z.glzt")
    assert np.array_equal(back.tokens, seq.tokens) and np.array_equal(back.param, seq.param)
    assert (back.dt, back.t0) == (0.25, 1.0)
    raw = (tmp_path / "z.glzt").read_bytes()
    (tmp_path / "bad.glzt").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_latent_sequence(tmp_path / "bad.glzt")


def test_invalid_construction():
    with pytest.raises(ValidationError):
        init_temporal(10, 1, n_heads=3)
    with pytest.raises(ValidationError):
        _model(context=1)
