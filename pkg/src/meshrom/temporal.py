"""Decoder-only attention model that advances flattened latent states in time.

Each step sees one embedded parameter token followed by the most recent
latent tokens. Attention heads use small MLPs for query, key and value maps.
All heads of a block are stored stacked along a leading axis so they run in
one batched matmul; :meth:`AttentionParams.head` returns a single head.

The prediction for the next state is ``Z_last + head(ln_f(h_last))`` where
``h_last`` is the residual stream at the last window slot.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, NumericError, ShapeError, ValidationError
from .nn import LayerNormParams, MlpParams, init_layernorm, init_mlp, layernorm_apply, mlp_apply

LATENT_MAGIC = b"GLZT"


@dataclass
class AttentionHeadParams:
    query: MlpParams
    key: MlpParams
    value: MlpParams

    def __post_init__(self):
        if self.query.n_out != self.key.n_out:
            raise ShapeError("query and key maps must share their output width")


@dataclass
class AttentionParams:
    """``n_heads`` heads stacked on a leading weight axis."""

    query: MlpParams
    key: MlpParams
    value: MlpParams
    n_heads: int

    def head(self, h: int) -> AttentionHeadParams:
        def pick(p):
            return MlpParams(list(p.layer_sizes), [Tensor(w.data[h]) for w in p.weights],
                             [Tensor(b.data[h, 0]) for b in p.biases], p.activation)

        return AttentionHeadParams(pick(self.query), pick(self.key), pick(self.value))


@dataclass
class Block:
    ln_1: LayerNormParams
    attn: AttentionParams
    ln_2: LayerNormParams
    mlp: MlpParams


@dataclass
class TemporalModelParams:
    blocks: list
    pos_embed: Tensor  # (context_length, D)
    param_embed: MlpParams
    ln_f: LayerNormParams
    head: MlpParams
    n_heads: int
    context_length: int
    scaled: bool = True
    param_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    param_std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ValidationError("the temporal model needs at least one block")
        if self.context_length < 2:
            raise ValidationError("context length must be >= 2 (parameter token plus one state)")
        if self.pos_embed.shape[0] < self.context_length:
            raise ValidationError("positional table shorter than the context length")
        if self.token_dim % self.n_heads:
            raise ValidationError(f"token width {self.token_dim} not divisible by {self.n_heads} heads")

    @property
    def token_dim(self) -> int:
        return int(self.pos_embed.shape[1])

    @property
    def max_states(self) -> int:
        """Latent tokens kept in a saturated window (the parameter token uses one slot)."""
        return self.context_length - 1


@dataclass
class LatentSequence:
    tokens: np.ndarray  # (T, D)
    param: np.ndarray
    dt: float = 1.0
    t0: float = 0.0

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.float64)
        if tok.ndim == 1:
            tok = tok[None, :]
        if tok.ndim != 2 or tok.shape[0] == 0:
            raise ValidationError("latent sequence must be a nonempty (T, D) array")
        self.tokens = tok
        self.param = np.atleast_1d(np.asarray(self.param, dtype=np.float64))

    def __len__(self):
        return int(self.tokens.shape[0])

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self))


# --- construction ----------------------------------------------------------------


def init_temporal(token_dim: int, n_param: int, *, n_blocks=2, n_heads=8, context_length=32, qk_dim=16,
                  mlp_hidden=128, mlp_layers=3, activation="relu", scaled=True, seed=0,
                  param_mean=None, param_std=None) -> TemporalModelParams:
    if token_dim % n_heads:
        raise ValidationError(f"token width {token_dim} not divisible by {n_heads} heads")
    rng = np.random.default_rng(seed)
    mid = [mlp_hidden] * (mlp_layers - 1)
    hb = (n_heads,)
    blocks = []
    for _ in range(n_blocks):
        attn = AttentionParams(
            init_mlp([token_dim, *mid, qk_dim], rng, activation, batch=hb),
            init_mlp([token_dim, *mid, qk_dim], rng, activation, batch=hb),
            init_mlp([token_dim, *mid, token_dim // n_heads], rng, activation, batch=hb),
            n_heads,
        )
        blocks.append(Block(init_layernorm(token_dim), attn, init_layernorm(token_dim),
                            init_mlp([token_dim, *mid, token_dim], rng, activation)))
    pos = Tensor(rng.normal(0.0, 0.02, (context_length, token_dim)), requires_grad=True)
    return TemporalModelParams(
        blocks=blocks,
        pos_embed=pos,
        param_embed=init_mlp([n_param, *mid, token_dim], rng, activation),
        ln_f=init_layernorm(token_dim),
        head=init_mlp([token_dim, token_dim], rng, activation, zero_last=True),
        n_heads=n_heads,
        context_length=context_length,
        scaled=scaled,
        param_mean=np.zeros(n_param) if param_mean is None else np.asarray(param_mean, float),
        param_std=np.ones(n_param) if param_std is None else np.asarray(param_std, float),
    )


# --- attention -------------------------------------------------------------------


def attention_logits_scale(qk_dim: int, scaled: bool) -> float:
    return 1.0 / math.sqrt(qk_dim) if scaled else 1.0


def multi_head_attention(x: Tensor, a: AttentionParams, scaled: bool = True):
    """Causal self-attention over ``x`` of shape ``(T, D)``.

    Returns ``(output (T, D), weights (H, T, T))``.
    """
    t, d = x.shape
    x3 = ad.reshape(x, (1, t, d))
    q = mlp_apply(a.query, x3)  # (H, T, k)
    k = mlp_apply(a.key, x3)
    v = mlp_apply(a.value, x3)  # (H, T, D/H)
    logits = ad.matmul(q, ad.transpose(k))
    s = attention_logits_scale(a.query.n_out, scaled)
    if s != 1.0:
        logits = ad.mul(logits, s)
    w = ad.softmax(logits, np.tril(np.ones((t, t), dtype=bool)))
    out = ad.matmul(w, v)
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (t, d))
    return out, w


def attention_weights(seq: LatentSequence, i: int, head: AttentionHeadParams, scaled: bool = True) -> np.ndarray:
    """Causal softmax weights of token ``i`` over tokens ``0..i`` for one head."""
    if not 0 <= i < len(seq):
        raise ValidationError(f"query index {i} outside sequence of length {len(seq)}")
    z = seq.tokens[: i + 1]
    q = mlp_apply(head.query, z[i:i + 1]).data
    k = mlp_apply(head.key, z).data
    logits = (q @ k.T) * attention_logits_scale(head.query.n_out, scaled)
    return ad.softmax(logits).data[0]


def _blocks(x: Tensor, p: TemporalModelParams) -> Tensor:
    for b in p.blocks:
        att, _ = multi_head_attention(layernorm_apply(b.ln_1, x), b.attn, p.scaled)
        x = ad.add(x, att)
        x = ad.add(x, mlp_apply(b.mlp, layernorm_apply(b.ln_2, x)))
    return x


def param_token(mu, p: TemporalModelParams) -> Tensor:
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    if mu.shape != p.param_mean.shape:
        raise ShapeError(f"parameter vector {mu.shape} vs model {p.param_mean.shape}")
    return mlp_apply(p.param_embed, Tensor(((mu - p.param_mean) / p.param_std)[None, :]))


def _predict(window: list, ptok: Tensor, p: TemporalModelParams) -> Tensor:
    """Next-token prediction from a window of ``(1, D)`` tensors."""
    n = len(window) + 1
    if n > p.context_length:
        raise ValidationError(f"window of {len(window)} states exceeds context length {p.context_length}")
    x = ad.concat([ptok, *window], axis=0)
    if x.shape[1] != p.token_dim:
        raise ShapeError(f"token width {x.shape[1]} vs model {p.token_dim}")
    h = _blocks(ad.add(x, p.pos_embed[:n]), p)
    last = h[n - 1:n]
    return ad.add(window[-1], mlp_apply(p.head, layernorm_apply(p.ln_f, last)))


def window_indices(j: int, n_sw: int) -> range:
    """Indices of the states kept when predicting ``Z_{j+1}`` from ``Z_0..Z_j``."""
    if j < n_sw - 1:
        return range(0, j + 1)
    return range(j + 2 - n_sw, j + 1)


def mhat_step(seq: LatentSequence, p: TemporalModelParams) -> np.ndarray:
    """Predict the token following ``seq`` (which must fit the window)."""
    if seq.tokens.shape[1] != p.token_dim:
        raise ShapeError(f"token width {seq.tokens.shape[1]} vs model {p.token_dim}")
    window = [Tensor(z[None, :]) for z in seq.tokens]
    return _predict(window, param_token(seq.param, p), p).data[0]


def predict_next(history, mu, p: TemporalModelParams) -> np.ndarray:
    """Predict ``Z_{j+1}`` from the full history ``Z_0..Z_j`` using the sliding window."""
    hist = np.atleast_2d(np.asarray(history, dtype=np.float64))
    idx = window_indices(len(hist) - 1, p.context_length)
    return mhat_step(LatentSequence(hist[idx.start:idx.stop], mu), p)


def sequence_predictions(tokens, mu, p: TemporalModelParams) -> np.ndarray:
    """Outputs at every slot of one causal pass; row ``k`` predicts ``Z_{k+1}``."""
    z = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    n = z.shape[0] + 1
    if n > p.context_length:
        raise ValidationError("sequence longer than the context window")
    x = ad.concat([param_token(mu, p), Tensor(z)], axis=0)
    h = _blocks(ad.add(x, p.pos_embed[:n]), p)
    return (ad.add(Tensor(z), mlp_apply(p.head, layernorm_apply(p.ln_f, h[1:n])))).data


def continue_rollout(history: list, mu, steps: int, p: TemporalModelParams) -> list:
    """Differentiable continuation of ``history`` (``(1, D)`` tensors); returns the ``steps`` new tokens."""
    if steps < 0:
        raise ValidationError("steps must be non-negative")
    if not history:
        raise ValidationError("rollout needs at least one history token")
    ptok = param_token(mu, p)
    zs = list(history)
    for _ in range(steps):
        j = len(zs) - 1
        idx = window_indices(j, p.context_length)
        try:
            zs.append(_predict(zs[idx.start:idx.stop], ptok, p))
        except NumericError as exc:
            raise NumericError(f"rollout step {j + 1}: {exc}") from None
    return zs[len(history):]


def rollout_tensors(z0: Tensor, mu, steps: int, p: TemporalModelParams) -> list:
    """Differentiable autoregressive rollout; returns ``[Z_0, ..., Z_steps]`` as ``(1, D)`` tensors."""
    return [z0] + continue_rollout([z0], mu, steps, p)


def rollout(z0, mu, steps: int, p: TemporalModelParams, dt: float = 1.0, t0: float = 0.0) -> LatentSequence:
    """Advance ``z0`` (a LatentState or flat token) ``steps`` times."""
    if steps < 1:
        raise ValidationError("rollout needs steps >= 1")
    tok = z0.flatten() if hasattr(z0, "flatten") and not isinstance(z0, np.ndarray) else np.ravel(z0)
    if tok.shape[0] != p.token_dim:
        raise ShapeError(f"initial token width {tok.shape[0]} vs model {p.token_dim}")
    zs = rollout_tensors(Tensor(tok[None, :]), mu, steps, p)
    return LatentSequence(np.vstack([z.data for z in zs]), mu, dt, t0)


# --- latent trajectory file ----------------------------------------------------

_LAT_HEAD = struct.Struct("<4sIIdI")


def write_latent_sequence(seq: LatentSequence, path) -> None:
    head = _LAT_HEAD.pack(LATENT_MAGIC, seq.tokens.shape[1], len(seq), seq.dt, seq.param.size)
    extra = struct.pack("<d", seq.t0)
    Path(path).write_bytes(head + seq.param.astype("<f8").tobytes() + extra
                           + np.ascontiguousarray(seq.tokens, "<f8").tobytes())


def read_latent_sequence(path) -> LatentSequence:
    buf = Path(path).read_bytes()
    if len(buf) < _LAT_HEAD.size:
        raise FormatError("truncated latent header", path=path)
    magic, d, count, dt, npar = _LAT_HEAD.unpack_from(buf, 0)
    if magic != LATENT_MAGIC:
        raise FormatError(f"bad latent magic {magic!r}", path=path)
    off = _LAT_HEAD.size
    need = off + 8 * npar + 8 + 8 * d * count
    if len(buf) != need:
        raise FormatError(f"latent file is {len(buf)} bytes, expected {need}", path=path)
    param = np.frombuffer(buf, "<f8", npar, off).copy()
    off += 8 * npar
    (t0,) = struct.unpack_from("<d", buf, off)
    off += 8
    tokens = np.frombuffer(buf, "<f8", d * count, off).reshape(count, d).copy()
    return LatentSequence(tokens, param, dt, t0)
