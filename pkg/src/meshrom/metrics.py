"""Rollout evaluation: relative errors, mesh vorticity, CRPS, a Gaussian Frechet distance and line profiles."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError
from .mesh import FieldSnapshot, MeshGraph

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12


# --- relative error ------------------------------------------------------------------


def rrmse_arrays(pred, truth) -> float:
    """``sqrt(mean((pred - truth)^2)) / sqrt(mean(truth^2))`` over all entries."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    denom = math.sqrt(float(np.mean(truth ** 2)))
    if denom == 0.0:
        raise ValidationError("truth is identically zero; relative error is undefined")
    return math.sqrt(float(np.mean((pred - truth) ** 2))) / denom


def _stack_field(seq, name: str) -> np.ndarray:
    try:
        return np.stack([s.field(name) for s in seq])
    except KeyError:
        raise ValidationError(f"field {name!r} missing from a snapshot") from None


def rrmse(pred, truth, field: str) -> float:
    """RRMSE of one named field over all nodes and times of two snapshot sequences."""
    pred, truth = list(pred), list(truth)
    if len(pred) != len(truth):
        raise ValidationError(f"sequence lengths differ: {len(pred)} vs {len(truth)}")
    if not truth:
        raise ValidationError("empty sequences")
    return rrmse_arrays(_stack_field(pred, field), _stack_field(truth, field))


# --- gradients and vorticity ------------------------------------------------------------


@dataclass
class LsqGradient:
    """Per-node weighted least-squares gradient operators over the 1-ring.

    ``gx @ f`` and ``gy @ f`` give the x and y derivatives. Nodes whose
    neighbour displacements do not span the plane are flagged and get zero rows.
    """

    gx: object
    gy: object
    degenerate: np.ndarray

    @classmethod
    def build(cls, g: MeshGraph) -> "LsqGradient":
        import scipy.sparse as sp

        n = g.node_count
        src, dst, _ = g.directed_edges()
        d = g.coords[dst] - g.coords[src]
        w = 1.0 / np.hypot(d[:, 0], d[:, 1])
        a11 = np.bincount(src, w * d[:, 0] ** 2, n)
        a12 = np.bincount(src, w * d[:, 0] * d[:, 1], n)
        a22 = np.bincount(src, w * d[:, 1] ** 2, n)
        det = a11 * a22 - a12 ** 2
        scale = (a11 + a22) ** 2
        degenerate = ~(det > 1e-10 * scale)
        safe = np.where(degenerate, 1.0, det)
        # inverse normal matrix applied to each weighted displacement
        i11, i12, i22 = a22 / safe, -a12 / safe, a11 / safe
        cx = w * (i11[src] * d[:, 0] + i12[src] * d[:, 1])
        cy = w * (i12[src] * d[:, 0] + i22[src] * d[:, 1])
        keep = ~degenerate[src]
        cx, cy = np.where(keep, cx, 0.0), np.where(keep, cy, 0.0)
        # gradient at src = sum_j c_j (f_dst - f_src)
        def op(c):
            m = sp.csr_matrix((c, (src, dst)), shape=(n, n))
            return (m - sp.diags(np.asarray(m.sum(axis=1)).ravel())).tocsr()
        return cls(op(cx), op(cy), degenerate)

    def __call__(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        return np.stack([self.gx @ f, self.gy @ f], axis=-1)


def lsq_gradient(g: MeshGraph, f) -> np.ndarray:
    """``(N, 2)`` gradient of a nodal field."""
    return LsqGradient.build(g)(f)


def vorticity(g: MeshGraph, s: FieldSnapshot, op: LsqGradient | None = None) -> np.ndarray:
    """``dv/dx - du/dy`` per node; degenerate stencils give 0 and a warning."""
    s.check_against(g)
    op = op or LsqGradient.build(g)
    u, v = s.field("u"), s.field("v")
    w = op.gx @ v - op.gy @ u
    nbad = int(op.degenerate.sum())
    if nbad:
        warnings.warn(f"{nbad} node(s) lack two non-collinear neighbours; vorticity set to 0 there", stacklevel=2)
    return w


def vorticity_sequence(g: MeshGraph, seq) -> np.ndarray:
    op = LsqGradient.build(g)
    return np.stack([vorticity(g, s, op) for s in seq])


# --- probabilistic scores ------------------------------------------------------------------


def _mean_abs_pairs(x, axis=0):
    """``mean_{i,j} |x_i - x_j|`` along ``axis`` via the sorted-order identity."""
    xs = np.sort(x, axis=axis)
    n = xs.shape[axis]
    k = np.arange(n, dtype=np.float64)
    shape = [1] * xs.ndim
    shape[axis] = n
    coef = (2 * k - n + 1).reshape(shape)
    return 2.0 * np.sum(coef * xs, axis=axis) / n ** 2


def crps(ensemble, obs: float) -> float:
    """Empirical CRPS: ``mean|x_i - obs| - 0.5 mean|x_i - x_j|``."""
    x = np.asarray(ensemble, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValidationError("CRPS needs a nonempty ensemble")
    return float(np.mean(np.abs(x - obs)) - 0.5 * _mean_abs_pairs(x))


def crps_field(ensemble, obs) -> float:
    """Node-averaged CRPS; ``ensemble`` is ``(M, ...)`` and ``obs`` matches the trailing shape."""
    x = np.asarray(ensemble, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if x.ndim < 1 or x.shape[0] == 0:
        raise ValidationError("CRPS needs a nonempty ensemble")
    if x.shape[1:] != obs.shape:
        raise ShapeError(f"ensemble {x.shape} vs observation {obs.shape}")
    scores = np.mean(np.abs(x - obs), axis=0) - 0.5 * _mean_abs_pairs(x, axis=0)
    return float(np.mean(scores))


def gaussian_frechet(pred, truth) -> float:
    """Frechet distance between 1-D Gaussian fits: ``(m1 - m2)^2 + (s1 - s2)^2``."""
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(truth, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValidationError("Gaussian Frechet distance needs at least two samples per set")
    s1 = math.sqrt(max(float(a.var()), VARIANCE_FLOOR))
    s2 = math.sqrt(max(float(b.var()), VARIANCE_FLOOR))
    return float((a.mean() - b.mean()) ** 2 + (s1 - s2) ** 2)


# --- line profiles -----------------------------------------------------------------------


@dataclass
class LineProfile:
    x_line: float
    y: np.ndarray  # bin centres
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray  # nodes per bin


def line_profiles(seq, g: MeshGraph, x_lines, field: str = "vorticity") -> list:
    """Time statistics of bin-averaged values along vertical lines.

    Nodes within one median edge length of each ``x`` are binned in ``y``
    with the same width; per time step the bin average is taken, then its
    mean and standard deviation over time. ``seq`` is a snapshot sequence or
    a ``(T, N)`` array of nodal values. Lines with no nodes are skipped.
    """
    if isinstance(seq, np.ndarray):
        values = np.atleast_2d(seq)
        if values.shape[1] != g.node_count:
            raise ShapeError(f"values have {values.shape[1]} nodes, mesh has {g.node_count}")
    elif field == "vorticity":
        values = vorticity_sequence(g, seq)
    else:
        values = _stack_field(seq, field)
    h = g.median_edge_distance()
    x, y = g.coords[:, 0], g.coords[:, 1]
    out = []
    for xl in x_lines:
        band = np.flatnonzero(np.abs(x - xl) <= h)
        if band.size == 0:
            warnings.warn(f"no nodes near x = {xl}; line skipped", stacklevel=2)
            continue
        bins = np.floor(y[band] / h).astype(np.int64)
        ub, inv = np.unique(bins, return_inverse=True)
        counts = np.bincount(inv, minlength=ub.size)
        sums = np.zeros((values.shape[0], ub.size))
        for k in range(ub.size):
            sums[:, k] = values[:, band[inv == k]].sum(axis=1)
        avg = sums / counts
        out.append(LineProfile(float(xl), (ub + 0.5) * h, avg.mean(axis=0), avg.std(axis=0), counts))
    return out


# --- report -----------------------------------------------------------------------------------


@dataclass
class EvalReport:
    field_rrmse: dict
    vorticity_rrmse: float
    crps: float
    gaussian_frechet: float
    wall_time_predict: float = 0.0
    wall_time_reference: float = 0.0
    n_steps: int = 0
    profiles: list = field(default_factory=list)
    truth_profiles: list = field(default_factory=list)
    degenerate_nodes: int = 0

    def __post_init__(self):
        vals = list(self.field_rrmse.values()) + [self.vorticity_rrmse, self.crps, self.gaussian_frechet,
                                                   self.wall_time_predict, self.wall_time_reference]
        for v in vals:
            if not (math.isfinite(v) and v >= -1e-15):
                raise ValidationError(f"metric value {v!r} is not finite and non-negative")
        self.crps = max(self.crps, 0.0)

    @property
    def speedup(self) -> float:
        if self.wall_time_predict <= 0:
            return math.inf
        return self.wall_time_reference / self.wall_time_predict

    def to_text(self) -> str:
        lines = [f"rrmse.{k} = {v!r}" for k, v in self.field_rrmse.items()]
        lines += [
            f"rrmse.vorticity = {self.vorticity_rrmse!r}",
            f"crps.vorticity = {self.crps!r}",
            f"gaussian_frechet.vorticity = {self.gaussian_frechet!r}",
            f"n_steps = {self.n_steps}",
            f"wall_time_predict = {self.wall_time_predict!r}",
            f"wall_time_reference = {self.wall_time_reference!r}",
            f"speedup = {self.speedup!r}",
            f"degenerate_nodes = {self.degenerate_nodes}",
        ]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    def write_profiles(self, pred_path, truth_path=None) -> None:
        write_profiles_csv(self.profiles, pred_path)
        if truth_path is not None:
            write_profiles_csv(self.truth_profiles, truth_path)


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = float(v)
    return out


def write_profiles_csv(profiles, path) -> None:
    rows = ["x_line,y_bin,mean,std,count"]
    for p in profiles:
        for y, m, s, c in zip(p.y, p.mean, p.std, p.count):
            rows.append(f"{float(p.x_line)!r},{float(y)!r},{float(m)!r},{float(s)!r},{int(c)}")
    Path(path).write_text("\n".join(rows) + "\n")


def evaluate(pred, truth, g: MeshGraph, ensemble=None, x_lines=None, wall_time_predict=0.0,
             wall_time_reference=0.0) -> EvalReport:
    """Compare aligned snapshot sequences.

    ``ensemble`` optionally holds further predicted sequences for the CRPS;
    without it the single prediction is a one-member ensemble (CRPS = MAE).
    """
    pred, truth = list(pred), list(truth)
    if len(pred) != len(truth) or not truth:
        raise ValidationError(f"sequence lengths differ or are empty: {len(pred)} vs {len(truth)}")
    names = truth[0].field_names
    for s in pred:
        for name in names:
            if name not in s.field_names:
                raise ValidationError(f"prediction lacks field {name!r}")
    field_err = {name: rrmse(pred, truth, name) for name in names}
    op = LsqGradient.build(g)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        wp = np.stack([vorticity(g, s, op) for s in pred])
        wt = np.stack([vorticity(g, s, op) for s in truth])
        members = [wp]
        for seq in ensemble or []:
            seq = list(seq)
            if len(seq) != len(truth):
                raise ValidationError("ensemble member length differs from the truth sequence")
            members.append(np.stack([vorticity(g, s, op) for s in seq]))
    try:
        w_err = rrmse_arrays(wp, wt)
    except ValidationError:
        w_err = 0.0 if np.array_equal(wp, wt) else math.inf
    if x_lines is None:
        x0, x1 = g.coords[:, 0].min(), g.coords[:, 0].max()
        x_lines = list(x0 + (x1 - x0) * np.array([0.25, 0.5, 0.75]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        profiles = line_profiles(wp, g, x_lines)
        truth_profiles = line_profiles(wt, g, x_lines)
    return EvalReport(
        field_rrmse=field_err,
        vorticity_rrmse=w_err,
        crps=crps_field(np.stack(members), wt),
        gaussian_frechet=gaussian_frechet(wp, wt),
        wall_time_predict=wall_time_predict,
        wall_time_reference=wall_time_reference,
        n_steps=len(pred) - 1,
        profiles=profiles,
        truth_profiles=truth_profiles,
        degenerate_nodes=int(op.degenerate.sum()),
    )
