"""Run configuration: dataclass sections, presets, INI files and CLI overrides."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SECTIONS = ("data", "encoder", "decoder", "temporal", "train")


@dataclass
class DataConfig:
    mesh_kind: str = "unit_square"
    target_nodes: int = 300
    mesh_seed: int = 0
    seed: int = 0  # trajectory i uses initial-condition seed ``seed + i``
    n_trajectories: int = 2
    n_snapshots: int = 64  # per trajectory, including the initial state
    dt: float = 0.05
    velocity_field: str = "taylor_green"
    velocity_scale: float = 1.0
    # cycled over trajectories; each distinct value gives a distinct Peclet number
    diffusivities: tuple = (0.005, 0.01)
    initial_condition: str = "gaussian_blob"
    boundary: str = "closed"
    inflow_value: float = 0.0
    train_fraction: float = 0.9


@dataclass
class CoderConfig:
    n_latent: int = 16
    n_latent_points: int = 1024
    hidden: int = 128
    mlp_hidden: int = 128
    mlp_layers: int = 3
    n_gnn: int = 3
    k_interp: int = 3
    activation: str = "relu"


@dataclass
class TemporalConfig:
    n_blocks: int = 2
    n_heads: int = 8
    context_length: int = 32
    qk_dim: int = 16
    mlp_hidden: int = 128
    mlp_layers: int = 3
    activation: str = "relu"
    scaled: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    ae_steps: int = 2000
    ae_batch: int = 4
    eval_every: int = 50
    patience: int = 20
    dyn_steps: int = 1000
    dyn_batch: int = 1
    # rollout horizons for successive equal shares of the dynamics steps; 0 means the full sequence
    curriculum: tuple = (1, 4, 0)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: CoderConfig = field(default_factory=CoderConfig)
    decoder: CoderConfig = field(default_factory=CoderConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        d, e, c, t, tr = self.data, self.encoder, self.decoder, self.temporal, self.train
        from .datagen import INITIAL_CONDITIONS, MESH_KINDS, VELOCITY_FIELDS
        from .autodiff import ACTIVATIONS

        _choice("data.mesh_kind", d.mesh_kind, MESH_KINDS)
        _choice("data.velocity_field", d.velocity_field, VELOCITY_FIELDS)
        _choice("data.initial_condition", d.initial_condition, INITIAL_CONDITIONS)
        _choice("data.boundary", d.boundary, ("closed", "open"))
        _positive("data.target_nodes", d.target_nodes, 10)
        _positive("data.n_trajectories", d.n_trajectories)
        _positive("data.n_snapshots", d.n_snapshots, 2)
        _positive("data.dt", d.dt, 0.0, strict=True)
        if not d.diffusivities or min(d.diffusivities) <= 0:
            raise ConfigError("data.diffusivities must be a nonempty list of positive numbers")
        if not 0 < d.train_fraction <= 1:
            raise ConfigError("data.train_fraction must lie in (0, 1]")
        for name, cc in (("encoder", e), ("decoder", c)):
            _choice(f"{name}.activation", cc.activation, tuple(ACTIVATIONS))
            for key in ("n_latent", "n_latent_points", "hidden", "mlp_hidden", "n_gnn", "k_interp"):
                _positive(f"{name}.{key}", getattr(cc, key))
            _positive(f"{name}.mlp_layers", cc.mlp_layers, 2)
        for key in ("n_latent", "n_latent_points", "k_interp"):
            if getattr(e, key) != getattr(c, key):
                raise ConfigError(f"encoder.{key} and decoder.{key} must agree")
        if e.n_latent_points > d.target_nodes:
            raise ConfigError("encoder.n_latent_points exceeds the mesh size")
        _choice("temporal.activation", t.activation, tuple(ACTIVATIONS))
        for key in ("n_blocks", "n_heads", "qk_dim", "mlp_hidden"):
            _positive(f"temporal.{key}", getattr(t, key))
        _positive("temporal.context_length", t.context_length, 2)
        _positive("temporal.mlp_layers", t.mlp_layers, 2)
        if (e.n_latent * e.n_latent_points) % t.n_heads:
            raise ConfigError(f"token width {e.n_latent * e.n_latent_points} is not divisible by "
                              f"temporal.n_heads={t.n_heads}")
        for key in ("ae_batch", "dyn_batch", "eval_every", "patience"):
            _positive(f"train.{key}", getattr(tr, key))
        for key in ("ae_steps", "dyn_steps"):
            _positive(f"train.{key}", getattr(tr, key), 0)
        if not 0 < tr.lr_min <= tr.lr:
            raise ConfigError("train.lr_min must lie in (0, train.lr]")
        if not tr.curriculum or min(tr.curriculum) < 0:
            raise ConfigError("train.curriculum must list non-negative horizons")
        return self

    @property
    def token_dim(self) -> int:
        return self.encoder.n_latent * self.encoder.n_latent_points

    def to_dict(self) -> dict:
        return {s: _jsonable(dataclasses.asdict(getattr(self, s))) for s in SECTIONS}

    def section_hash(self, *sections) -> str:
        """SHA-256 of the canonical JSON of the named sections."""
        d = self.to_dict()
        blob = json.dumps({s: d[s] for s in sections}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def coder_hash(self) -> str:
        return self.section_hash("data", "encoder", "decoder")

    def dynamics_hash(self) -> str:
        return self.section_hash("data", "encoder", "decoder", "temporal")


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _choice(name, value, options):
    if value not in options:
        raise ConfigError(f"{name}={value!r}; choose from {list(options)}")


def _positive(name, value, minimum=1, strict=False):
    if (value <= minimum) if strict else (value < minimum):
        raise ConfigError(f"{name}={value!r} must be {'>' if strict else '>='} {minimum}")


# --- presets -----------------------------------------------------------------------


def _full_scale_coder(n_gnn: int, n_points: int) -> CoderConfig:
    return CoderConfig(n_latent=16, n_latent_points=n_points, hidden=128, mlp_hidden=128, mlp_layers=3, n_gnn=n_gnn)


def preset(name: str) -> RunConfig:
    """``toy`` (desk scale), ``cylinder`` and ``bfs`` (published architecture sizes)."""
    if name == "toy":
        coder = CoderConfig(n_latent=8, n_latent_points=32, hidden=32, mlp_hidden=32, mlp_layers=3, n_gnn=2)
        return RunConfig(
            data=DataConfig(),
            encoder=coder,
            decoder=dataclasses.replace(coder),
            temporal=TemporalConfig(n_blocks=2, n_heads=8, context_length=8, qk_dim=16, mlp_hidden=64),
            train=TrainConfig(ae_steps=1500, ae_batch=4, eval_every=25, dyn_steps=300, curriculum=(1, 4, 0)),
        )
    if name == "cylinder":
        return RunConfig(
            data=DataConfig(mesh_kind="disk_with_hole", target_nodes=27127, n_trajectories=1, n_snapshots=5000,
                            dt=0.01, diffusivities=(0.002,), boundary="open", inflow_value=1.0,
                            train_fraction=0.9),
            encoder=_full_scale_coder(3, 1024),
            decoder=_full_scale_coder(3, 1024),
            temporal=TemporalConfig(n_blocks=2, n_heads=8, context_length=32, mlp_hidden=128, mlp_layers=3),
            train=TrainConfig(),
        )
    if name == "bfs":
        return RunConfig(
            data=DataConfig(mesh_kind="step_channel", target_nodes=20480, n_trajectories=1, n_snapshots=5000,
                            dt=0.02, velocity_field="channel_shear", diffusivities=(0.001,), boundary="open",
                            train_fraction=0.9),
            encoder=_full_scale_coder(5, 2048),
            decoder=_full_scale_coder(5, 2048),
            temporal=TemporalConfig(n_blocks=2, n_heads=8, context_length=8, mlp_hidden=128, mlp_layers=3),
            train=TrainConfig(),
        )
    raise ConfigError(f"unknown preset {name!r}; choose from ['toy', 'cylinder', 'bfs']")


PRESETS = ("toy", "cylinder", "bfs")


# --- INI files and overrides ------------------------------------------------------


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            item = type(default[0]) if default else float
            return tuple(item(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """``{"section.key": "text"}`` to a new config; unknown keys are errors."""
    sections = {s: dataclasses.asdict(getattr(cfg, s)) for s in SECTIONS}
    for dotted, raw in overrides.items():
        sec, _, key = dotted.partition(".")
        if sec not in sections or key not in sections[sec]:
            raise ConfigError(f"unknown config key {dotted!r}")
        default = getattr(getattr(cfg, sec), key)
        sections[sec][key] = raw if not isinstance(raw, str) else _parse_value(dotted, raw, default)
    return RunConfig(**{s: type(getattr(cfg, s))(**sections[s]) for s in SECTIONS})


def read_config(path, base: RunConfig | None = None) -> RunConfig:
    """INI file with the five sections; an optional ``[run] preset`` picks the base."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if base is None:
        base = preset(cp.get("run", "preset", fallback="toy"))
    overrides = {}
    for sec in cp.sections():
        if sec == "run":
            continue
        if sec not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            overrides[f"{sec}.{key}"] = raw
    return apply_overrides(base, overrides)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for f in dataclasses.fields(getattr(cfg, sec)):
            lines.append(f"{f.name} = {_format_value(getattr(getattr(cfg, sec), f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(format_config(cfg))


def config_from_dict(d: dict) -> RunConfig:
    base = RunConfig()
    return apply_overrides(base, {f"{s}.{k}": (tuple(v) if isinstance(v, list) else v)
                                  for s, sec in d.items() for k, v in sec.items()})


def flag_specs(cfg: RunConfig | None = None):
    """``(flag, dotted_key, default)`` for every config field, e.g. ``--train.lr``."""
    cfg = cfg or RunConfig()
    for sec in SECTIONS:
        for f in dataclasses.fields(getattr(cfg, sec)):
            yield f"--{sec}.{f.name}", f"{sec}.{f.name}", getattr(getattr(cfg, sec), f.name)
