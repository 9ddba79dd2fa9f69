"""Decoupled training: the graph autoencoder first, then latent dynamics on frozen encodings.

Both stages minimise mean squared errors with Adam and a cosine learning-rate
decay. Mini-batches are a deterministic function of ``(seed, step)`` so that a
run resumed from a checkpoint continues bit-identically.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import RunConfig, TrainConfig, config_from_dict
from .dataset import NormStats, TrajectoryDataset
from .errors import NumericError, ValidationError
from .gnn import DecoderParams, EncoderParams, coder_context, decode_nodes, encode_nodes, init_decoder, init_encoder
from .mesh import FieldSnapshot, MeshGraph
from .nn import (AdamState, adam_arrays, adam_from_arrays, adam_step, load_parameter_arrays, named_parameters,
                 parameter_arrays, read_checkpoint, write_checkpoint, zero_grad)
from .sampling import CoordSet, farthest_point_sample
from .temporal import (LatentSequence, TemporalModelParams, continue_rollout, init_temporal, read_latent_sequence,
                       write_latent_sequence)

log = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    """Raised when a loss or gradient turns non-finite; ``step`` is the failing step."""

    def __init__(self, message, step, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 1:
        return lr
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * frac))


def _adam(cfg: TrainConfig, step=0, arrays=None) -> AdamState:
    kw = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    return adam_from_arrays(arrays or {}, step, **kw)


def _check_finite(params: dict, what: str, step: int):
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise TrainingDiverged(f"non-finite {what} gradient in {name} at step {step}", step)


# --- autoencoder model bundle ------------------------------------------------------


@dataclass
class Autoencoder:
    encoder: EncoderParams
    decoder: DecoderParams
    norm: NormStats
    graph: MeshGraph
    config: RunConfig

    @property
    def latent(self) -> CoordSet:
        return self.encoder.latent_coords

    def context(self):
        return coder_context(self.graph, self.latent, self.encoder.k_interp)

    def params(self) -> dict:
        return named_parameters({"encoder": self.encoder, "decoder": self.decoder})

    def encode_values(self, x, batch: int | None = None) -> np.ndarray:
        """Physical snapshots ``(B, N_u, N)`` to latent tokens ``(B, N_z * |X2|)`` (no tape)."""
        x = np.asarray(x, dtype=np.float64)
        b = x.shape[0]
        ctx = self.context()
        u = np.moveaxis(self.norm.normalize(x), 1, 2).reshape(b * self.graph.node_count, -1)
        z = encode_nodes(Tensor(u), ctx, self.encoder, b).data
        nz, m = self.encoder.n_latent, len(self.latent)
        # row-major flattening of each (N_z, |X2|) latent matrix
        return np.ascontiguousarray(z.reshape(b, m, nz).transpose(0, 2, 1).reshape(b, nz * m))

    def decode_tokens(self, tokens) -> np.ndarray:
        """Latent tokens ``(B, N_z * |X2|)`` to physical snapshots ``(B, N_u, N)``."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
        b = tokens.shape[0]
        nz, m = self.encoder.n_latent, len(self.latent)
        z = tokens.reshape(b, nz, m).transpose(0, 2, 1).reshape(b * m, nz)
        u = decode_nodes(Tensor(z), self.context(), self.decoder, b).data
        u = u.reshape(b, self.graph.node_count, -1).transpose(0, 2, 1)
        return self.norm.denormalize(u)

    def reconstruct(self, x) -> np.ndarray:
        return self.decode_tokens(self.encode_values(x))


def build_autoencoder(cfg: RunConfig, graph: MeshGraph, norm: NormStats, latent: CoordSet | None = None) -> Autoencoder:
    e, d = cfg.encoder, cfg.decoder
    if latent is None:
        if e.n_latent_points > graph.node_count:
            raise ValidationError(f"{e.n_latent_points} latent points requested from a {graph.node_count}-node mesh")
        latent = farthest_point_sample(CoordSet(graph.coords), e.n_latent_points, seed=cfg.train.seed)
    n_fields = len(norm.field_names)
    enc = init_encoder(n_fields, latent, n_latent=e.n_latent, hidden=e.hidden, mlp_hidden=e.mlp_hidden,
                       mlp_layers=e.mlp_layers, n_gnn=e.n_gnn, k_interp=e.k_interp, activation=e.activation,
                       seed=cfg.train.seed)
    dec = init_decoder(n_fields, latent, n_latent=d.n_latent, hidden=d.hidden, mlp_hidden=d.mlp_hidden,
                       mlp_layers=d.mlp_layers, n_gnn=d.n_gnn, k_interp=d.k_interp, activation=d.activation,
                       seed=cfg.train.seed + 1)
    return Autoencoder(enc, dec, norm, graph, cfg)


@dataclass
class TrainState:
    """Resumable optimiser and early-stopping state."""

    step: int = 0
    adam: AdamState | None = None
    history: list = field(default_factory=list)  # (step, loss)
    evals: list = field(default_factory=list)  # (step, metric)
    best_metric: float = math.inf
    best_step: int = -1
    bad_evals: int = 0
    best: dict | None = None
    stopped_early: bool = False


def save_autoencoder(path, model: Autoencoder, state: TrainState | None = None, extra: dict | None = None) -> None:
    arrays = {f"model.{k}": v for k, v in parameter_arrays({"encoder": model.encoder, "decoder": model.decoder}).items()}
    arrays["latent.points"] = np.asarray(model.latent.points)
    if model.latent.source_index is not None:
        arrays["latent.source_index"] = model.latent.source_index.astype(np.float64)
    manifest = {
        "kind": "autoencoder",
        "config": model.config.to_dict(),
        "coder_hash": model.config.coder_hash(),
        "mesh_hash": model.graph.content_hash(),
        "norm": model.norm.to_dict(),
    }
    if state is not None:
        arrays.update(adam_arrays(state.adam) if state.adam else {})
        if state.best is not None:
            arrays.update({f"best.{k}": v for k, v in state.best.items()})
        manifest["state"] = _state_manifest(state)
    manifest.update(extra or {})
    write_checkpoint(path, arrays, manifest)


def _state_manifest(state: TrainState) -> dict:
    return {"step": state.step, "history": state.history, "evals": state.evals,
            "best_metric": None if not math.isfinite(state.best_metric) else state.best_metric,
            "best_step": state.best_step, "bad_evals": state.bad_evals, "stopped_early": state.stopped_early}


def _state_from(manifest: dict, arrays: dict, cfg: TrainConfig) -> TrainState:
    st = manifest.get("state")
    if st is None:
        return TrainState()
    best = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")} or None
    return TrainState(
        step=int(st["step"]),
        adam=_adam(cfg, int(st["step"]), {k: v for k, v in arrays.items() if k.startswith("adam.")}),
        history=[tuple(h) for h in st["history"]],
        evals=[tuple(h) for h in st["evals"]],
        best_metric=math.inf if st["best_metric"] is None else float(st["best_metric"]),
        best_step=int(st["best_step"]),
        bad_evals=int(st["bad_evals"]),
        best=best,
        stopped_early=bool(st.get("stopped_early", False)),
    )


def load_autoencoder(path, graph: MeshGraph | None = None, expect_hash: str | None = None):
    """Returns ``(model, state, manifest)``; checks mesh and config hashes when given."""
    manifest, arrays = read_checkpoint(path)
    if manifest.get("kind") != "autoencoder":
        raise ValidationError(f"{path} is not an autoencoder checkpoint")
    cfg = config_from_dict(manifest["config"])
    if cfg.coder_hash() != manifest["coder_hash"]:
        raise ValidationError(f"{path}: embedded config does not match its recorded hash")
    if expect_hash is not None and expect_hash != manifest["coder_hash"]:
        raise ValidationError("config hash differs from the autoencoder checkpoint; refusing to mix them")
    if graph is None:
        raise ValidationError("a mesh graph is required to rebuild the autoencoder")
    if graph.content_hash() != manifest["mesh_hash"]:
        raise ValidationError("mesh differs from the one the autoencoder was trained on")
    src = arrays.get("latent.source_index")
    latent = CoordSet(arrays["latent.points"], "sampled", None if src is None else src.astype(np.int64))
    model = build_autoencoder(cfg, graph, NormStats.from_dict(manifest["norm"]), latent)
    load_parameter_arrays({"encoder": model.encoder, "decoder": model.decoder}, arrays, prefix="model.")
    return model, _state_from(manifest, arrays, cfg.train), manifest


# --- autoencoder training ------------------------------------------------------------


def _batch_indices(seed: int, step: int, n: int, b: int) -> np.ndarray:
    """Snapshots for ``step``: epochs are seeded permutations, partial tail batches dropped."""
    b = min(b, n)
    per_epoch = n // b
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return np.sort(perm[k * b:(k + 1) * b])


def reconstruction_loss(model: Autoencoder, xn: np.ndarray) -> Tensor:
    """MSE between normalised snapshots ``(B, N_u, N)`` and their reconstruction."""
    b, nu, n = xn.shape
    u = np.moveaxis(xn, 1, 2).reshape(b * n, nu)
    ctx = model.context()
    z = encode_nodes(Tensor(u), ctx, model.encoder, b)
    out = decode_nodes(z, ctx, model.decoder, b)
    return ad.mse_loss(out, u)


def dataset_loss(model: Autoencoder, xn: np.ndarray, batch: int = 16) -> float:
    """Mean reconstruction MSE over all snapshots, evaluated without a tape."""
    total = 0.0
    for s in range(0, xn.shape[0], batch):
        part = xn[s:s + batch]
        total += reconstruction_loss(model, part).item() * part.shape[0]
    return total / xn.shape[0]


def validation_rrmse(model: Autoencoder, x: np.ndarray, batch: int = 16) -> float:
    """Field-averaged relative RMSE of reconstructions in physical units."""
    from .metrics import rrmse_arrays

    rec = np.concatenate([model.reconstruct(x[s:s + batch]) for s in range(0, x.shape[0], batch)])
    return float(np.mean([rrmse_arrays(rec[:, f], x[:, f]) for f in range(x.shape[1])]))


def train_autoencoder(ds: TrajectoryDataset, model: Autoencoder, cfg: TrainConfig | None = None,
                      state: TrainState | None = None, checkpoint: str | Path | None = None,
                      callback=None, until: int | None = None) -> TrainState:
    """Adam on the reconstruction MSE; keeps the best validation parameters.

    Validation is the held-out tail of each trajectory, or the training data if
    the split leaves nothing out. On a non-finite loss the parameters of the
    last finite step are restored, saved to ``checkpoint`` and
    :class:`TrainingDiverged` is raised. ``until`` pauses after that many total
    steps without swapping in the best parameters, so the run can be resumed.
    """
    cfg = cfg or model.config.train
    state = state or TrainState()
    if state.adam is None:
        state.adam = _adam(cfg)
    params = model.params()
    xn = model.norm.normalize(ds.train_values())
    val = ds.test_values()
    if val.shape[0] == 0:
        val = ds.train_values()
    total = cfg.ae_steps
    if state.step >= total or state.stopped_early:
        _restore_best(model, state)
        return state
    if state.best is None:
        _evaluate(model, val, state, cfg)
    stop = total if until is None else min(total, until)
    while state.step < stop:
        step = state.step
        idx = _batch_indices(cfg.seed, step, xn.shape[0], cfg.ae_batch)
        good = {k: t.data for k, t in params.items()}
        try:
            zero_grad(params)
            with Tape() as tape:
                loss = reconstruction_loss(model, xn[idx])
                tape.backward(loss)
            _check_finite(params, "autoencoder", step)
        except NumericError as exc:
            for k, t in params.items():
                t.data = good[k]
            if checkpoint is not None:
                save_autoencoder(checkpoint, model, state)
            raise TrainingDiverged(f"autoencoder diverged at step {step}: {exc}", step, checkpoint) from None
        adam_step(params, state.adam, cosine_lr(step, total, cfg.lr, cfg.lr_min))
        state.step += 1
        state.history.append((step, loss.item()))
        if callback is not None:
            callback(state)
        if state.step % cfg.eval_every == 0 or state.step == total:
            _evaluate(model, val, state, cfg)
            if state.bad_evals >= cfg.patience:
                state.stopped_early = True
                log.info("early stop at step %d (best %.4g at %d)", state.step, state.best_metric, state.best_step)
                break
    if state.step >= total or state.stopped_early:
        _restore_best(model, state)
    return state


def _evaluate(model, val, state: TrainState, cfg: TrainConfig) -> None:
    metric = validation_rrmse(model, val)
    state.evals.append((state.step, metric))
    if metric < state.best_metric:
        state.best_metric, state.best_step, state.bad_evals = metric, state.step, 0
        state.best = parameter_arrays({"encoder": model.encoder, "decoder": model.decoder})
    else:
        state.bad_evals += 1


def _restore_best(model: Autoencoder, state: TrainState) -> None:
    if state.best is not None:
        load_parameter_arrays({"encoder": model.encoder, "decoder": model.decoder}, state.best)


# --- encoding ------------------------------------------------------------------------------


LATENT_MANIFEST = "latent_manifest.json"


def encode_dataset(ds: TrajectoryDataset, model: Autoencoder, out_dir=None, expect_hash: str | None = None,
                   batch: int = 16) -> list:
    """Encode every snapshot of every trajectory; optionally write ``latent_XXX.glzt`` files."""
    if expect_hash is not None and expect_hash != model.config.coder_hash():
        raise ValidationError("config hash differs from the autoencoder checkpoint")
    if not ds.graph.same_as(model.graph):
        raise ValidationError("dataset mesh differs from the autoencoder mesh")
    seqs = []
    for i, v in enumerate(ds.values):
        tokens = np.concatenate([model.encode_values(v[s:s + batch]) for s in range(0, v.shape[0], batch)])
        seqs.append(LatentSequence(tokens, ds.params[i], ds.dt, 0.0))
    if out_dir is not None:
        write_latent_dataset(seqs, out_dir, model, ds.n_train)
    return seqs


def write_latent_dataset(seqs, out_dir, model: Autoencoder, n_train: int) -> Path:
    from .sampling import write_latent_points

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(seqs):
        name = f"latent_{i:03d}.glzt"
        write_latent_sequence(s, out / name)
        files.append(name)
    write_latent_points(model.latent, out / "latent_points.txt")
    man = {"coder_hash": model.config.coder_hash(), "mesh_hash": model.graph.content_hash(), "n_train": n_train,
           "n_latent": model.encoder.n_latent, "n_latent_points": len(model.latent), "files": files}
    (out / LATENT_MANIFEST).write_text(json.dumps(man, indent=1, sort_keys=True))
    return out


def read_latent_dataset(path):
    """Returns ``(sequences, manifest)``."""
    path = Path(path)
    mpath = path / LATENT_MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no latent manifest at {mpath}")
    man = json.loads(mpath.read_text())
    return [read_latent_sequence(path / f) for f in man["files"]], man


# --- dynamics ------------------------------------------------------------------------------


@dataclass
class Dynamics:
    params: TemporalModelParams
    config: RunConfig


def param_stats(params) -> tuple:
    mus = np.stack([np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in params])
    mean = mus.mean(axis=0)
    std = mus.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def build_dynamics(cfg: RunConfig, n_param: int, param_mean=None, param_std=None) -> Dynamics:
    t = cfg.temporal
    p = init_temporal(cfg.token_dim, n_param, n_blocks=t.n_blocks, n_heads=t.n_heads,
                      context_length=t.context_length, qk_dim=t.qk_dim, mlp_hidden=t.mlp_hidden,
                      mlp_layers=t.mlp_layers, activation=t.activation, scaled=t.scaled,
                      seed=cfg.train.seed + 2, param_mean=param_mean, param_std=param_std)
    return Dynamics(p, cfg)


def save_dynamics(path, model: Dynamics, state: TrainState | None = None, extra: dict | None = None) -> None:
    arrays = {f"model.{k}": v for k, v in parameter_arrays(model.params).items()}
    manifest = {
        "kind": "dynamics",
        "config": model.config.to_dict(),
        "dynamics_hash": model.config.dynamics_hash(),
        "coder_hash": model.config.coder_hash(),
        "param_mean": model.params.param_mean.tolist(),
        "param_std": model.params.param_std.tolist(),
    }
    if state is not None:
        arrays.update(adam_arrays(state.adam) if state.adam else {})
        manifest["state"] = _state_manifest(state)
    manifest.update(extra or {})
    write_checkpoint(path, arrays, manifest)


def load_dynamics(path, expect_hash: str | None = None):
    manifest, arrays = read_checkpoint(path)
    if manifest.get("kind") != "dynamics":
        raise ValidationError(f"{path} is not a dynamics checkpoint")
    cfg = config_from_dict(manifest["config"])
    if cfg.dynamics_hash() != manifest["dynamics_hash"]:
        raise ValidationError(f"{path}: embedded config does not match its recorded hash")
    if expect_hash is not None and expect_hash != manifest["dynamics_hash"]:
        raise ValidationError("config hash differs from the dynamics checkpoint; refusing to mix them")
    model = build_dynamics(cfg, len(manifest["param_mean"]), manifest["param_mean"], manifest["param_std"])
    load_parameter_arrays(model.params, arrays, prefix="model.")
    return model, _state_from(manifest, arrays, cfg.train), manifest


def curriculum_horizon(step: int, total: int, schedule, full: int) -> int:
    """Horizon for ``step``: ``schedule`` entries cover equal shares of ``total``; 0 means ``full``."""
    k = min(len(schedule) - 1, step * len(schedule) // max(total, 1))
    h = schedule[k]
    return full if h == 0 else min(h, full)


def rollout_loss(tokens: np.ndarray, mu, p: TemporalModelParams, horizon: int, start: int = 0) -> Tensor:
    """Sum over the next ``horizon`` steps of the per-step MSE, rolling out from the true history up to ``start``.

    No teacher forcing: predicted tokens are fed back, and gradients flow
    through the whole rollout.
    """
    if start < 0 or horizon < 1 or start + horizon > tokens.shape[0] - 1:
        raise ValidationError(f"horizon {horizon} from {start} exceeds a {tokens.shape[0]}-token sequence")
    lo = max(0, start + 2 - p.context_length)
    hist = [Tensor(tokens[j:j + 1]) for j in range(lo, start + 1)]
    preds = continue_rollout(hist, mu, horizon, p)
    loss = None
    for k, z in enumerate(preds, start=start + 1):
        term = ad.mse_loss(z, tokens[k:k + 1])
        loss = term if loss is None else ad.add(loss, term)
    return loss


def train_dynamics(seqs: list, model: Dynamics, n_train: int | None = None, cfg: TrainConfig | None = None,
                   state: TrainState | None = None, checkpoint=None, callback=None,
                   until: int | None = None) -> TrainState:
    """Autoregressive training on the leading ``n_train`` tokens of every sequence.

    Each step draws ``dyn_batch`` trajectories and, for horizons shorter than
    the full sequence, a random start index; the loss is summed over the batch.
    """
    cfg = cfg or model.config.train
    state = state or TrainState()
    if state.adam is None:
        state.adam = _adam(cfg)
    params = named_parameters(model.params)
    data = [(s.tokens[: n_train or len(s)], s.param) for s in seqs]
    if min(d[0].shape[0] for d in data) < 2:
        raise ValidationError("dynamics training needs at least two tokens per trajectory")
    total = cfg.dyn_steps
    stop = total if until is None else min(total, until)
    while state.step < stop:
        step = state.step
        rng = np.random.default_rng([cfg.seed, 7, step])
        chosen = np.sort(rng.choice(len(data), size=min(cfg.dyn_batch, len(data)), replace=False))
        good = {k: t.data for k, t in params.items()}
        try:
            zero_grad(params)
            with Tape() as tape:
                loss = None
                for i in chosen:
                    tok, mu = data[i]
                    full = tok.shape[0] - 1
                    h = curriculum_horizon(step, total, cfg.curriculum, full)
                    start = int(rng.integers(0, full - h + 1))
                    term = rollout_loss(tok, mu, model.params, h, start)
                    loss = term if loss is None else ad.add(loss, term)
                tape.backward(loss)
            _check_finite(params, "dynamics", step)
        except NumericError as exc:
            for k, t in params.items():
                t.data = good[k]
            if checkpoint is not None:
                save_dynamics(checkpoint, model, state)
            raise TrainingDiverged(f"dynamics diverged at step {step}: {exc}", step, checkpoint) from None
        adam_step(params, state.adam, cosine_lr(step, total, cfg.lr, cfg.lr_min))
        state.step += 1
        state.history.append((step, loss.item()))
        if callback is not None:
            callback(state)
    return state


# --- prediction -----------------------------------------------------------------------------


@dataclass
class Prediction:
    snapshots: list
    latent: LatentSequence
    wall_time_encode: float
    wall_time_rollout: float
    wall_time_decode: float

    @property
    def wall_time(self) -> float:
        return self.wall_time_encode + self.wall_time_rollout + self.wall_time_decode


def predict(ae: Autoencoder, dyn: Dynamics, initial: FieldSnapshot, steps: int, dt: float,
            decode_batch: int = 16) -> Prediction:
    """Encode the initial snapshot, roll out ``steps`` latent steps, then decode all states together."""
    from .temporal import rollout

    if steps < 0:
        raise ValidationError("steps must be non-negative")
    if dyn.config.coder_hash() != ae.config.coder_hash():
        raise ValidationError("dynamics checkpoint was trained on a different autoencoder configuration")
    initial.check_against(ae.graph)
    if tuple(initial.field_names) != ae.norm.field_names:
        missing = set(ae.norm.field_names) - set(initial.field_names)
        raise ValidationError(f"initial snapshot lacks field(s) {sorted(missing)}" if missing
                              else "initial snapshot fields are in a different order")
    t0 = time.perf_counter()
    z0 = ae.encode_values(initial.values[None])[0]
    t1 = time.perf_counter()
    if steps:
        seq = rollout(z0, initial.param, steps, dyn.params, dt, initial.time)
    else:
        seq = LatentSequence(z0[None], initial.param, dt, initial.time)
    t2 = time.perf_counter()
    fields = np.concatenate([ae.decode_tokens(seq.tokens[s:s + decode_batch])
                             for s in range(0, len(seq), decode_batch)])
    t3 = time.perf_counter()
    snaps = [FieldSnapshot(fields[k], ae.norm.field_names, float(seq.times[k]), initial.param)
             for k in range(len(seq))]
    return Prediction(snaps, seq, t1 - t0, t2 - t1, t3 - t2)
