"""MLP, layer normalisation, Adam, parameter trees and the weight checkpoint format."""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ShapeError, ValidationError

CHECKPOINT_MAGIC = b"GLWT"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    """Fully connected network; hidden layers use ``activation``, the last is linear.

    Weights may carry leading batch axes, e.g. ``(H, in, out)`` for one MLP per
    attention head evaluated in a single pass.
    """

    layer_sizes: list
    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ad.ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValidationError("MLP needs one weight and bias per consecutive layer pair")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            fan_in, fan_out = self.layer_sizes[k], self.layer_sizes[k + 1]
            if w.shape[-2:] != (fan_in, fan_out) or b.shape[-1] != fan_out:
                raise ShapeError(f"layer {k}: weight {w.shape}, bias {b.shape} vs sizes {fan_in}->{fan_out}")

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.gain.shape != self.bias.shape:
            raise ShapeError("layer norm gain and bias must have equal length")
        if not self.eps > 0:
            raise ValidationError("layer norm eps must be positive")


def init_mlp(layer_sizes, rng: np.random.Generator, activation: str = "relu",
             batch: tuple = (), zero_last: bool = False) -> MlpParams:
    """Kaiming-style uniform init, bound ``sqrt(6 / fan_in)`` for hidden layers.

    The output layer uses ``sqrt(3 / fan_in)`` (unit-gain) unless ``zero_last``.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValidationError(f"invalid MLP layer sizes {sizes}")
    batch = tuple(batch)
    ws, bs = [], []
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        last = k == len(sizes) - 2
        if last and zero_last:
            w = np.zeros(batch + (fan_in, fan_out))
        else:
            bound = math.sqrt((3.0 if last else 6.0) / fan_in)
            w = rng.uniform(-bound, bound, batch + (fan_in, fan_out))
        b_shape = batch + ((1,) if batch else ()) + (fan_out,)
        ws.append(Tensor(w, requires_grad=True))
        bs.append(Tensor(np.zeros(b_shape), requires_grad=True))
    return MlpParams(sizes, ws, bs, activation)


def init_layernorm(width: int, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(width), True), Tensor(np.zeros(width), True), eps)


def mlp_apply(p: MlpParams, x) -> Tensor:
    act = ad.ACTIVATIONS[p.activation]
    h = ad.as_tensor(x)
    if h.shape[-1] != p.n_in:
        raise ShapeError(f"MLP expects input width {p.n_in}, got {h.shape}")
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if k < last:
            h = act(h)
    return h


def layernorm_apply(p: LayerNormParams, x) -> Tensor:
    return ad.layernorm(x, p.gain, p.bias, p.eps)


# --- parameter trees -----------------------------------------------------------


def named_parameters(obj, prefix: str = "") -> dict:
    """Flatten nested dataclasses / lists / dicts into ``{dotted.name: Tensor}``."""
    out = {}
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out[prefix] = obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            out.update(named_parameters(getattr(obj, f.name), f"{prefix}{f.name}."))
    elif isinstance(obj, (list, tuple)):
        for k, v in enumerate(obj):
            out.update(named_parameters(v, f"{prefix}{k}."))
    elif isinstance(obj, dict):
        for k in sorted(obj):
            out.update(named_parameters(obj[k], f"{prefix}{k}."))
    return {k.rstrip("."): v for k, v in out.items()}


def parameter_arrays(obj) -> dict:
    return {k: v.data.copy() for k, v in named_parameters(obj).items()}


def load_parameter_arrays(obj, arrays: dict, prefix: str = "") -> None:
    params = named_parameters(obj)
    for name, t in params.items():
        key = prefix + name
        if key not in arrays:
            raise ValidationError(f"checkpoint has no entry {key!r}")
        a = np.asarray(arrays[key], dtype=np.float64)
        if a.shape != t.shape:
            raise ShapeError(f"{key}: checkpoint shape {a.shape} vs model {t.shape}")
        t.data = a.copy()


def zero_grad(params: dict) -> None:
    for t in params.values():
        t.grad = None


def count_parameters(obj) -> int:
    return int(np.sum([t.data.size for t in named_parameters(obj).values()]))


# --- Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("Adam betas must lie in (0, 1)")


def adam_step(params: dict, state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, applied in place."""
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise ValidationError(f"no gradient for parameter(s) {missing[:5]}")
    lr = state.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        if m.shape != t.data.shape:
            raise ShapeError(f"Adam moment shape mismatch for {name}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_arrays(state: AdamState) -> dict:
    out = {}
    for k in state.m:
        out[f"adam.m.{k}"] = state.m[k]
        out[f"adam.v.{k}"] = state.v[k]
    return out


def adam_from_arrays(arrays: dict, step: int, **kw) -> AdamState:
    st = AdamState(step=step, **kw)
    for k, a in arrays.items():
        if k.startswith("adam.m."):
            st.m[k[7:]] = np.array(a)
        elif k.startswith("adam.v."):
            st.v[k[7:]] = np.array(a)
    return st


# --- checkpoint file -----------------------------------------------------------


def write_checkpoint(path, arrays: dict, manifest: dict | None = None) -> None:
    """``GLWT`` | version | manifest JSON | named f64 tables sorted by name."""
    meta = json.dumps(manifest or {}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Returns ``(manifest, {name: ndarray})``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", path=path)
    try:
        version, mlen = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", path=path)
        off = 12
        manifest = json.loads(buf[off:off + mlen].decode())
        off += mlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(buf):
                raise FormatError(f"truncated payload for {name!r}", path=path)
            arrays[name] = np.frombuffer(buf, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}", path=path) from None
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint tables", path=path)
    return manifest, arrays
