"""Snapshot trajectories on one mesh, their train/test split, normalisation and on-disk layout."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .mesh import FieldSnapshot, MeshGraph, build_graph, read_snapshot, write_mesh, write_snapshot

DATASET_FORMAT = "meshrom-dataset"
DATASET_VERSION = 1
TIMING_FILE = "timing.json"


@dataclass
class TrajectoryDataset:
    """Trajectories ``(T, N_u, N)`` sampled with a common stride on a single mesh.

    The split is in time: the leading ``n_train`` snapshots of every trajectory
    are training data and the remainder is held out.
    """

    graph: MeshGraph
    values: list
    params: list
    dt: float
    field_names: tuple = ("scalar", "u", "v")
    n_train: int | None = None
    wall_times: list = field(default_factory=list)

    def __post_init__(self):
        if not self.values:
            raise ValidationError("dataset needs at least one trajectory")
        if len(self.params) != len(self.values):
            raise ValidationError("one parameter vector per trajectory is required")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValidationError("snapshot stride must be positive")
        self.values = [np.asarray(v, dtype=np.float64) for v in self.values]
        self.params = [np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in self.params]
        self.field_names = tuple(self.field_names)
        n = self.graph.node_count
        for i, v in enumerate(self.values):
            if v.ndim != 3 or v.shape[1:] != (len(self.field_names), n):
                raise ShapeError(f"trajectory {i} has shape {v.shape}, expected (T, {len(self.field_names)}, {n})")
        if len({p.shape for p in self.params}) != 1:
            raise ValidationError("all trajectories need parameter vectors of equal length")
        shortest = min(v.shape[0] for v in self.values)
        if self.n_train is None:
            self.n_train = shortest
        if not 1 <= self.n_train <= shortest:
            raise ValidationError(f"n_train={self.n_train} outside [1, {shortest}]")
        if not self.wall_times:
            self.wall_times = [0.0] * len(self.values)

    @classmethod
    def from_trajectories(cls, graph: MeshGraph, trajectories, train_fraction: float = 0.9):
        """Build from ``datagen.Trajectory`` objects; all must share the stride ``dt``."""
        if not 0 < train_fraction <= 1:
            raise ValidationError("train_fraction must lie in (0, 1]")
        trajs = list(trajectories)
        if not trajs:
            raise ValidationError("dataset needs at least one trajectory")
        dts = {round(t.dt, 12) for t in trajs}
        if len(dts) != 1:
            raise ValidationError(f"trajectories have different strides {sorted(dts)}")
        names = trajs[0].snapshots[0].field_names
        values = []
        for t in trajs:
            times = np.array([s.time for s in t.snapshots])
            check_uniform_times(times, t.dt)
            values.append(np.stack([s.values for s in t.snapshots]))
        shortest = min(v.shape[0] for v in values)
        n_train = max(1, min(shortest, int(round(train_fraction * shortest))))
        return cls(graph, values, [t.param for t in trajs], trajs[0].dt, names, n_train,
                   [t.wall_time for t in trajs])

    @property
    def n_trajectories(self) -> int:
        return len(self.values)

    @property
    def n_fields(self) -> int:
        return len(self.field_names)

    def lengths(self) -> list:
        return [v.shape[0] for v in self.values]

    def train_values(self) -> np.ndarray:
        """All training snapshots stacked as ``(M, N_u, N)``, trajectory-major."""
        return np.concatenate([v[: self.n_train] for v in self.values])

    def test_values(self) -> np.ndarray:
        parts = [v[self.n_train:] for v in self.values]
        return np.concatenate(parts) if any(p.shape[0] for p in parts) else np.zeros((0,) + self.values[0].shape[1:])

    def snapshot(self, i: int, j: int) -> FieldSnapshot:
        return FieldSnapshot(self.values[i][j], self.field_names, j * self.dt, self.params[i])

    def sequence(self, i: int, start: int = 0, stop: int | None = None) -> list:
        stop = self.values[i].shape[0] if stop is None else stop
        return [self.snapshot(i, j) for j in range(start, stop)]


def check_uniform_times(times, dt: float, tol: float = 1e-9) -> None:
    times = np.asarray(times, dtype=np.float64)
    if times.size > 1 and np.max(np.abs(np.diff(times) - dt)) > tol * max(1.0, abs(dt)):
        raise ValidationError("snapshot times are not uniformly spaced by dt")


# --- normalisation ---------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    """Per-field mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray
    field_names: tuple = ("scalar", "u", "v")

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        std = np.array(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.shape != (len(self.field_names),):
            raise ShapeError("mean/std must have one entry per field")
        for name, s in zip(self.field_names, std):
            if not s > 0 or not math.isfinite(s):
                raise ValidationError(f"field {name!r} has zero or invalid variance; it cannot be normalised")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "field_names", tuple(self.field_names))

    def normalize(self, x):
        """``x`` has the field axis second to last: ``(..., N_u, N)``."""
        return (np.asarray(x) - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, x):
        return np.asarray(x) * self.std[:, None] + self.mean[:, None]

    def to_dict(self) -> dict:
        return {"field_names": list(self.field_names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), tuple(d["field_names"]))


def compute_norm_stats(ds: TrajectoryDataset) -> NormStats:
    x = ds.train_values()
    if x.shape[0] == 0:
        raise ValidationError("training split is empty")
    flat = np.moveaxis(x, 1, 0).reshape(ds.n_fields, -1)
    mean = flat.mean(axis=1)
    std = np.sqrt(((flat - mean[:, None]) ** 2).mean(axis=1))
    # relative floor: a field that is constant up to rounding noise counts as constant
    tiny = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    for name, bad in zip(ds.field_names, tiny):
        if bad:
            raise ValidationError(f"field {name!r} has zero variance over the training split")
    return NormStats(mean, std, ds.field_names)


# --- directory layout ----------------------------------------------------------------


def _traj_dir(i: int) -> str:
    return f"traj_{i:03d}"


def write_dataset(ds: TrajectoryDataset, root, extra: dict | None = None) -> Path:
    """``manifest.json``, ``mesh.txt`` and ``traj_XXX/snap_XXXXX.gled`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_mesh(ds.graph, root / "mesh.txt")
    entries = []
    for i, v in enumerate(ds.values):
        d = root / _traj_dir(i)
        d.mkdir(exist_ok=True)
        for j in range(v.shape[0]):
            write_snapshot(ds.snapshot(i, j), d / f"snap_{j:05d}.gled")
        seq = {
            "field_names": list(ds.field_names),
            "dt": ds.dt,
            "times": [j * ds.dt for j in range(v.shape[0])],
            "param": ds.params[i].tolist(),
            "mesh": "../mesh.txt",
        }
        (d / "sequence.json").write_text(json.dumps(seq, indent=1, sort_keys=True))
        # timings live apart from the data so reruns stay byte-identical
        (d / TIMING_FILE).write_text(json.dumps({"wall_time": ds.wall_times[i]}))
        entries.append({"dir": _traj_dir(i), "n_snapshots": int(v.shape[0]), "param": ds.params[i].tolist()})
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "mesh": "mesh.txt",
        "mesh_hash": ds.graph.content_hash(),
        "field_names": list(ds.field_names),
        "dt": ds.dt,
        "n_train": ds.n_train,
        "split": {"train": [0, ds.n_train], "test": [ds.n_train, None]},
        "trajectories": entries,
    }
    manifest.update(extra or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_dataset_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", path=path) from None
    if man.get("format") != DATASET_FORMAT:
        raise FormatError(f"not a dataset manifest (format={man.get('format')!r})", path=path)
    return man


def read_wall_time(directory) -> float:
    path = Path(directory) / TIMING_FILE
    if not path.is_file():
        return 0.0
    return float(json.loads(path.read_text()).get("wall_time", 0.0))


def read_dataset(root) -> TrajectoryDataset:
    root = Path(root)
    man = read_dataset_manifest(root)
    g = build_graph(root / man["mesh"])
    if man.get("mesh_hash") and man["mesh_hash"] != g.content_hash():
        raise ValidationError("mesh file does not match the hash recorded in the dataset manifest")
    names = tuple(man["field_names"])
    values, params, walls = [], [], []
    for e in man["trajectories"]:
        d = root / e["dir"]
        snaps = [read_snapshot(d / f"snap_{j:05d}.gled", names) for j in range(e["n_snapshots"])]
        for s in snaps:
            s.check_against(g)
        check_uniform_times([s.time for s in snaps], man["dt"])
        values.append(np.stack([s.values for s in snaps]))
        params.append(np.array(e["param"]))
        walls.append(read_wall_time(d))
    return TrajectoryDataset(g, values, params, float(man["dt"]), names, int(man["n_train"]), walls)
