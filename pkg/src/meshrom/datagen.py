"""Synthetic training data: triangulated domains and an explicit FV transport solver.

Cells of a Delaunay triangulation are the graph nodes (at their centroids).
The scalar is advanced by first-order upwind advection plus two-point central
diffusion with explicit Euler steps. Advective face fluxes are differences of
an analytic stream function at the face end points, so every cell's discrete
divergence telescopes to zero and the update is a convex combination of
neighbouring values whenever the positivity bound holds.
"""
from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay

from .errors import ConfigError, GenerationError, NumericError, ValidationError
from .mesh import FieldSnapshot, MeshGraph

log = logging.getLogger(__name__)

MESH_KINDS = ("unit_square", "disk_with_hole", "step_channel")
VELOCITY_FIELDS = ("taylor_green", "channel_shear", "uniform")
INITIAL_CONDITIONS = ("gaussian_blob", "sine_mode", "random_smooth")
CFL_LIMIT = 0.5
DIFFUSION_LIMIT = 0.25
# relative amplitude of the streamwise wave added to the shear profile, so v is not identically zero
SHEAR_WAVE = 0.05

# disk_with_hole geometry
DISK_RADIUS = 1.0
HOLE_RADIUS = 0.2
# step_channel geometry: inlet channel x in [-5, 0], y in [1, 2]; expansion x in [0, 10], y in [0, 2]
STEP_X0, STEP_X1, STEP_H, CHANNEL_H = -5.0, 10.0, 1.0, 2.0


@dataclass(frozen=True, eq=False)
class Domain:
    kind: str

    @property
    def bbox(self):
        if self.kind == "unit_square":
            return (0.0, 1.0, 0.0, 1.0)
        if self.kind == "disk_with_hole":
            return (-DISK_RADIUS, DISK_RADIUS, -DISK_RADIUS, DISK_RADIUS)
        return (STEP_X0, STEP_X1, 0.0, CHANNEL_H)

    @property
    def reference_length(self) -> float:
        if self.kind == "disk_with_hole":
            return 2 * HOLE_RADIUS
        if self.kind == "step_channel":
            return STEP_H
        return 1.0

    def inside(self, p, tol=0.0):
        x, y = p[..., 0], p[..., 1]
        if self.kind == "unit_square":
            return (x >= -tol) & (x <= 1 + tol) & (y >= -tol) & (y <= 1 + tol)
        if self.kind == "disk_with_hole":
            r = np.hypot(x, y)
            return (r <= DISK_RADIUS + tol) & (r >= HOLE_RADIUS - tol)
        solid = (x < -tol) & (y < STEP_H - tol)
        box = (x >= STEP_X0 - tol) & (x <= STEP_X1 + tol) & (y >= -tol) & (y <= CHANNEL_H + tol)
        return box & ~solid

    def spacing(self, p):
        """Relative target spacing in (0, 1]; smaller near the hole or step corner."""
        if self.kind == "disk_with_hole":
            r = np.hypot(p[..., 0], p[..., 1])
            return 0.35 + 0.65 * np.clip((r - HOLE_RADIUS) / (0.6 * (DISK_RADIUS - HOLE_RADIUS)), 0, 1)
        if self.kind == "step_channel":
            d = np.hypot(p[..., 0], p[..., 1] - STEP_H)
            return 0.4 + 0.6 * np.clip(d / 3.0, 0, 1)
        return np.ones(p.shape[:-1])

    def boundary_curves(self):
        """Closed or open polylines/arcs as callables ``t in [0, 1] -> point`` with their lengths."""
        if self.kind == "unit_square":
            return [_segment((0, 0), (1, 0)), _segment((1, 0), (1, 1)),
                    _segment((1, 1), (0, 1)), _segment((0, 1), (0, 0))]
        if self.kind == "disk_with_hole":
            return [_circle(DISK_RADIUS), _circle(HOLE_RADIUS)]
        pts = [(STEP_X0, STEP_H), (0, STEP_H), (0, 0), (STEP_X1, 0), (STEP_X1, CHANNEL_H),
               (STEP_X0, CHANNEL_H), (STEP_X0, STEP_H)]
        return [_segment(a, b) for a, b in zip(pts[:-1], pts[1:])]

    def boundary_tag(self, mid):
        x, y = mid
        if self.kind == "unit_square":
            return "wall"
        if self.kind == "disk_with_hole":
            return "hole" if math.hypot(x, y) < 0.5 * (HOLE_RADIUS + DISK_RADIUS) else "outer"
        if abs(x - STEP_X0) < 1e-9:
            return "inlet"
        if abs(x - STEP_X1) < 1e-9:
            return "outlet"
        return "wall"


def _segment(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return (lambda t: a + np.multiply.outer(t, b - a)), float(np.hypot(*(b - a)))


def _circle(r):
    return (lambda t: r * np.stack([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)], axis=-1)), 2 * np.pi * r


@dataclass(frozen=True, eq=False)
class FVMesh:
    """Triangulated domain; cells are graph nodes."""

    kind: str
    vertices: np.ndarray  # (V, 2)
    triangles: np.ndarray  # (C, 3), counter-clockwise

    @cached_property
    def domain(self) -> Domain:
        return Domain(self.kind)

    @cached_property
    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def areas(self):
        p = self.vertices[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def _faces(self):
        tri = self.triangles
        c = np.repeat(np.arange(tri.shape[0]), 3)
        a = tri.reshape(-1)
        b = tri[:, [1, 2, 0]].reshape(-1)
        key = np.sort(np.stack([a, b], axis=1), axis=1)
        order = np.lexsort((c, key[:, 1], key[:, 0]))
        key, c, a, b = key[order], c[order], a[order], b[order]
        same = np.all(key[1:] == key[:-1], axis=1)
        first = np.flatnonzero(same)
        interior = dict(c1=c[first], c2=c[first + 1], a=a[first], b=b[first])
        paired = np.zeros(len(c), dtype=bool)
        paired[first] = paired[first + 1] = True
        bnd = ~paired
        boundary = dict(c=c[bnd], a=a[bnd], b=b[bnd])  # a->b counter-clockwise around cell c
        return interior, boundary

    @property
    def interior_faces(self):
        return self._faces[0]

    @property
    def boundary_faces(self):
        return self._faces[1]

    @cached_property
    def graph(self) -> MeshGraph:
        f = self.interior_faces
        c1, c2 = np.minimum(f["c1"], f["c2"]), np.maximum(f["c1"], f["c2"])
        length = np.hypot(*(self.vertices[f["a"]] - self.vertices[f["b"]]).T)
        bf = self.boundary_faces
        tags = {}
        for c, a, b in zip(bf["c"].tolist(), bf["a"].tolist(), bf["b"].tolist()):
            tags.setdefault(c, self.domain.boundary_tag(0.5 * (self.vertices[a] + self.vertices[b])))
        return MeshGraph(self.centroids, np.stack([c1, c2], axis=1), length, tags)


def _dart_throw(domain: Domain, h: float, rng: np.random.Generator) -> np.ndarray:
    pts = []
    for curve, length in domain.boundary_curves():
        t, tt = [0.0], 0.0
        while True:
            r = h * float(domain.spacing(curve(np.array(tt))))
            tt += r / length
            if tt > 1.0 - 0.5 * r / length:
                break
            t.append(tt)
        pts.append(curve(np.array(t)))
    bpts = np.unique(np.round(np.vstack(pts), 12), axis=0)
    x0, x1, y0, y1 = domain.bbox
    area = (x1 - x0) * (y1 - y0)
    probe = rng.uniform((x0, y0), (x1, y1), size=(2000, 2))
    # ~30 candidates per expected accepted point
    n_cand = int(30 * 0.7 * area * np.mean(domain.spacing(probe) ** -2) / h ** 2)
    cand = rng.uniform((x0, y0), (x1, y1), size=(n_cand, 2))
    cand = cand[domain.inside(cand)]
    rad = h * domain.spacing(cand)
    cell = 0.5 * h * float(rad.min() / h if rad.size else 1.0)
    grid: dict = {}
    accepted = []

    def add(p):
        accepted.append(p)
        grid.setdefault((int(p[0] // cell), int(p[1] // cell)), []).append(p)

    for p in bpts:
        add(p)
    for p, r in zip(cand, rad):
        gx, gy = int(p[0] // cell), int(p[1] // cell)
        reach = int(math.ceil(r / cell))
        ok = True
        for ix in range(gx - reach, gx + reach + 1):
            for iy in range(gy - reach, gy + reach + 1):
                for q in grid.get((ix, iy), ()):
                    if (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 < r * r:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            add(p)
    return np.array(accepted)


def _triangulate(domain: Domain, pts: np.ndarray) -> FVMesh:
    tri = Delaunay(pts).simplices
    p = pts[tri]
    cen = p.mean(axis=1)
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    keep = domain.inside(cen) & (np.abs(area) > 1e-14)
    tri, area = tri[keep], area[keep]
    tri[area < 0] = tri[area < 0][:, [0, 2, 1]]
    # keep the largest connected set of cells
    m = FVMesh(domain.kind, pts, tri)
    f = m.interior_faces
    n = tri.shape[0]
    adj = sp.csr_matrix((np.ones(len(f["c1"])), (f["c1"], f["c2"])), shape=(n, n))
    ncomp, lab = connected_components(adj, directed=False)
    if ncomp > 1:
        tri = tri[lab == np.bincount(lab).argmax()]
    used = np.unique(tri)
    remap = np.full(pts.shape[0], -1)
    remap[used] = np.arange(used.size)
    return FVMesh(domain.kind, pts[used], remap[tri])


def make_fv_mesh(kind: str, target_nodes: int, seed: int = 0) -> FVMesh:
    """Triangulated domain with roughly ``target_nodes`` cells (within 20%)."""
    if kind not in MESH_KINDS:
        raise ValidationError(f"unknown mesh kind {kind!r}; choose from {MESH_KINDS}")
    if target_nodes < 10:
        raise ValidationError("target_nodes must be >= 10")
    domain = Domain(kind)
    x0, x1, y0, y1 = domain.bbox
    probe = np.random.default_rng(12345).uniform((x0, y0), (x1, y1), (20000, 2))
    inside = domain.inside(probe)
    area = (x1 - x0) * (y1 - y0) * inside.mean()
    mean_sq = float(np.mean(domain.spacing(probe[inside]) ** -2))
    # a Poisson-disc set of radius r has about 0.7 / r^2 points per unit area, and ~2 triangles per point
    h = math.sqrt(2 * 0.7 * area * mean_sq / target_nodes)
    best = None
    for _ in range(8):
        mesh = _triangulate(domain, _dart_throw(domain, h, np.random.default_rng(seed)))
        n = mesh.triangles.shape[0]
        if best is None or abs(n - target_nodes) < abs(best.triangles.shape[0] - target_nodes):
            best = mesh
        if abs(n - target_nodes) <= 0.1 * target_nodes:
            break
        h *= math.sqrt(n / target_nodes)
    n = best.triangles.shape[0]
    if abs(n - target_nodes) > 0.2 * target_nodes:
        raise GenerationError(f"could not reach {target_nodes} cells (got {n})")
    return best


def make_mesh(kind: str, target_nodes: int, seed: int = 0) -> MeshGraph:
    return make_fv_mesh(kind, target_nodes, seed).graph


# --- velocity fields -----------------------------------------------------------------


def stream_function(kind: str, bbox, scale: float):
    """``psi(points)`` with ``u = dpsi/dy``, ``v = -dpsi/dx``."""
    x0, x1, y0, y1 = bbox
    lx, ly = x1 - x0, y1 - y0
    if kind == "taylor_green":
        return lambda p: (scale * ly / np.pi) * np.sin(np.pi * (p[..., 0] - x0) / lx) * np.sin(np.pi * (p[..., 1] - y0) / ly)
    if kind == "channel_shear":
        def psi(p):
            s = (p[..., 1] - y0) / ly
            wave = SHEAR_WAVE * np.sin(2 * np.pi * (p[..., 0] - x0) / lx) * 16 * s ** 2 * (1 - s) ** 2
            return scale * ly * (2 * s ** 2 - 4.0 / 3.0 * s ** 3 + wave)
        return psi
    if kind == "uniform":
        return lambda p: scale * (p[..., 1] - y0)
    raise ValidationError(f"unknown velocity field {kind!r}; choose from {VELOCITY_FIELDS}")


def velocity(kind: str, bbox, scale: float, p):
    x0, x1, y0, y1 = bbox
    lx, ly = x1 - x0, y1 - y0
    x, y = p[..., 0], p[..., 1]
    if kind == "taylor_green":
        xi, eta = np.pi * (x - x0) / lx, np.pi * (y - y0) / ly
        return scale * np.sin(xi) * np.cos(eta), -scale * (ly / lx) * np.cos(xi) * np.sin(eta)
    if kind == "channel_shear":
        s = (y - y0) / ly
        kx = 2 * np.pi / lx
        arg = kx * (x - x0)
        u = 4 * s * (1 - s) + SHEAR_WAVE * 32 * np.sin(arg) * s * (1 - s) * (1 - 2 * s)
        v = -SHEAR_WAVE * ly * kx * np.cos(arg) * 16 * s ** 2 * (1 - s) ** 2
        return scale * u, scale * v
    if kind == "uniform":
        return np.full_like(x, scale), np.zeros_like(x)
    raise ValidationError(f"unknown velocity field {kind!r}")


def initial_condition(kind: str, mesh: FVMesh, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = mesh.domain.bbox
    lx, ly = x1 - x0, y1 - y0
    p = mesh.centroids
    if kind == "gaussian_blob":
        for _ in range(1000):
            c = rng.uniform((x0 + 0.2 * lx, y0 + 0.2 * ly), (x1 - 0.2 * lx, y1 - 0.2 * ly))
            if mesh.domain.inside(c[None, :], tol=0.0)[0]:
                break
        sigma = 0.12 * min(lx, ly)
        return np.exp(-((p - c) ** 2).sum(axis=1) / (2 * sigma ** 2))
    if kind == "sine_mode":
        kx, ky = rng.integers(1, 3, size=2)
        return np.sin(kx * np.pi * (p[:, 0] - x0) / lx) * np.sin(ky * np.pi * (p[:, 1] - y0) / ly)
    if kind == "random_smooth":
        out = np.zeros(p.shape[0])
        for _ in range(4):
            c = rng.uniform((x0, y0), (x1, y1))
            s = rng.uniform(0.08, 0.2) * min(lx, ly)
            out += rng.uniform(0.3, 1.0) * np.exp(-((p - c) ** 2).sum(axis=1) / (2 * s ** 2))
        return out
    if kind == "uniform":
        return np.ones(p.shape[0])
    raise ValidationError(f"unknown initial condition {kind!r}; choose from {INITIAL_CONDITIONS}")


# --- solver ------------------------------------------------------------------------


@dataclass
class SimConfig:
    mesh: FVMesh
    velocity_field: str = "taylor_green"
    diffusivity: float = 0.01
    dt: float = 0.05  # snapshot stride
    t_end: float = 1.0
    dt_inner: float | None = None  # None: largest stable step dividing dt
    initial_condition: str = "gaussian_blob"
    seed: int = 0
    velocity_scale: float = 1.0
    boundary: str = "closed"  # "closed": no flux through any boundary; "open": upwind in/outflow
    inflow_value: float = 0.0
    initial_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def peclet(self) -> float:
        if self.diffusivity <= 0:
            return math.inf
        return self.velocity_scale * self.mesh.domain.reference_length / self.diffusivity


@dataclass
class Trajectory:
    snapshots: list
    param: np.ndarray
    dt: float
    wall_time: float = 0.0
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.snapshots)


class TransportOperator:
    """Explicit one-step update ``phi <- A @ phi + c`` for a fixed config."""

    def __init__(self, cfg: SimConfig, dt_inner: float):
        m = cfg.mesh
        if cfg.boundary not in ("closed", "open"):
            raise ConfigError(f"boundary must be 'closed' or 'open', got {cfg.boundary!r}")
        if cfg.diffusivity < 0:
            raise ConfigError("diffusivity must be non-negative")
        psi = stream_function(cfg.velocity_field, m.domain.bbox, cfg.velocity_scale)
        v = m.vertices
        ps = psi(v)
        n = m.triangles.shape[0]
        f = m.interior_faces
        c1, c2, a, b = f["c1"], f["c2"], f["a"], f["b"]
        # orient a->b so that c2 lies to its right; then psi(b) - psi(a) is the c1->c2 flux
        e = v[b] - v[a]
        r = m.centroids[c2] - v[a]
        right = e[:, 0] * r[:, 1] - e[:, 1] * r[:, 0] < 0
        flux = np.where(right, ps[b] - ps[a], ps[a] - ps[b])
        length = np.hypot(e[:, 0], e[:, 1])
        dist = np.hypot(*(m.centroids[c2] - m.centroids[c1]).T)
        dcoef = cfg.diffusivity * length / dist
        fwd = np.maximum(flux, 0.0)  # c1 upwind of c2
        bwd = np.maximum(-flux, 0.0)
        rows = np.r_[c2, c1, c1, c2]
        cols = np.r_[c1, c2, c2, c1]
        vals = np.r_[fwd, bwd, dcoef, dcoef]
        off = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        out_rate = np.asarray(off.sum(axis=1)).ravel()
        const = np.zeros(n)
        if cfg.boundary == "open":
            bf = m.boundary_faces
            # a->b runs counter-clockwise around the cell, so its right side is outward
            bflux = ps[bf["b"]] - ps[bf["a"]]
            inflow = np.maximum(-bflux, 0.0)
            out_rate += np.bincount(bf["c"], weights=inflow, minlength=n)
            const = np.bincount(bf["c"], weights=inflow * cfg.inflow_value, minlength=n)
        scale = dt_inner / m.areas
        self.diag = 1.0 - scale * out_rate
        self.A = (sp.diags(self.diag) + sp.diags(scale) @ off).tocsr()
        self.c = scale * const
        self.dt_inner = dt_inner
        self.out_rate = out_rate

    def step(self, phi):
        return self.A @ phi + self.c


def stability_numbers(cfg: SimConfig, dt_inner: float):
    """``(cfl, diffusion_number)`` using the node speed maximum and the minimum edge distance."""
    g = cfg.mesh.graph
    dmin = float(g.edge_features[:, 3].min())
    u, v = velocity(cfg.velocity_field, cfg.mesh.domain.bbox, cfg.velocity_scale, cfg.mesh.centroids)
    vmax = float(np.max(np.hypot(u, v)))
    return vmax * dt_inner / dmin, cfg.diffusivity * dt_inner / dmin ** 2


def choose_inner_step(cfg: SimConfig) -> float:
    if cfg.dt <= 0:
        raise ConfigError("snapshot stride dt must be positive")
    cfl1, dif1 = stability_numbers(cfg, 1.0)
    rate = TransportOperator(cfg, 1.0).out_rate / cfg.mesh.areas
    limits = [math.inf]
    if cfl1 > 0:
        limits.append(0.95 * CFL_LIMIT / cfl1)
    if dif1 > 0:
        limits.append(0.95 * DIFFUSION_LIMIT / dif1)
    if rate.max() > 0:
        limits.append(0.95 / rate.max())
    n = max(1, math.ceil(cfg.dt / min(limits) - 1e-9))
    return cfg.dt / n


def generate_trajectory(cfg: SimConfig) -> Trajectory:
    """Snapshots ``(scalar, u, v)`` at ``t_0 .. t_end`` with stride ``cfg.dt``."""
    if cfg.velocity_field not in VELOCITY_FIELDS:
        raise ConfigError(f"unknown velocity field {cfg.velocity_field!r}")
    dt_inner = cfg.dt_inner if cfg.dt_inner is not None else choose_inner_step(cfg)
    ratio = cfg.dt / dt_inner
    n_inner = int(round(ratio))
    if n_inner < 1 or abs(ratio - n_inner) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"snapshot stride {cfg.dt} is not a positive integer multiple of {dt_inner}")
    cfl, dnum = stability_numbers(cfg, dt_inner)
    if cfl >= CFL_LIMIT:
        raise ConfigError(f"CFL number {cfl:.4g} >= {CFL_LIMIT}")
    if dnum >= DIFFUSION_LIMIT:
        raise ConfigError(f"diffusion number {dnum:.4g} >= {DIFFUSION_LIMIT}")
    op = TransportOperator(cfg, dt_inner)
    if op.diag.min() < 0:
        raise ConfigError(f"inner step {dt_inner:.4g} violates cell positivity (min diagonal {op.diag.min():.4g})")
    n_t = int(round(cfg.t_end / cfg.dt))
    if n_t < 1 or abs(n_t * cfg.dt - cfg.t_end) > 1e-9 * max(1.0, cfg.t_end):
        raise ConfigError("t_end must be a positive integer multiple of dt")
    if cfg.initial_values is not None:
        phi = np.array(cfg.initial_values, dtype=np.float64)
    else:
        phi = initial_condition(cfg.initial_condition, cfg.mesh, cfg.seed)
    u, v = velocity(cfg.velocity_field, cfg.mesh.domain.bbox, cfg.velocity_scale, cfg.mesh.centroids)
    mu = np.array([cfg.peclet if math.isfinite(cfg.peclet) else 0.0])
    names = ("scalar", "u", "v")
    snaps = [FieldSnapshot(np.vstack([phi, u, v]), names, 0.0, mu)]
    t_start = _time.perf_counter()
    step = 0
    for k in range(1, n_t + 1):
        for _ in range(n_inner):
            phi = op.step(phi)
            step += 1
        if not np.all(np.isfinite(phi)):
            raise NumericError(f"non-finite scalar at inner step {step}")
        snaps.append(FieldSnapshot(np.vstack([phi, u, v]), names, k * cfg.dt, mu))
    wall = _time.perf_counter() - t_start
    info = dict(dt_inner=dt_inner, n_inner=n_inner, cfl=cfl, diffusion_number=dnum,
                velocity_field=cfg.velocity_field, initial_condition=cfg.initial_condition,
                diffusivity=cfg.diffusivity, velocity_scale=cfg.velocity_scale, seed=cfg.seed,
                boundary=cfg.boundary)
    log.debug("trajectory Pe=%s: %d snapshots, %d inner steps", mu[0], len(snaps), step)
    return Trajectory(snaps, mu, cfg.dt, wall, info)


def cell_integral(mesh: FVMesh, phi) -> float:
    return float(np.dot(mesh.areas, phi))


def generate_dataset(cfg, mesh: FVMesh | None = None):
    """All trajectories described by a ``DataConfig``; trajectory ``i`` uses diffusivity ``i mod len``."""
    from .dataset import TrajectoryDataset

    mesh = mesh or make_fv_mesh(cfg.mesh_kind, cfg.target_nodes, cfg.mesh_seed)
    trajs = []
    for i in range(cfg.n_trajectories):
        sim = SimConfig(
            mesh=mesh,
            velocity_field=cfg.velocity_field,
            diffusivity=cfg.diffusivities[i % len(cfg.diffusivities)],
            dt=cfg.dt,
            t_end=cfg.dt * (cfg.n_snapshots - 1),
            initial_condition=cfg.initial_condition,
            seed=cfg.seed + i,
            velocity_scale=cfg.velocity_scale,
            boundary=cfg.boundary,
            inflow_value=cfg.inflow_value,
        )
        trajs.append(generate_trajectory(sim))
    return TrajectoryDataset.from_trajectories(mesh.graph, trajs, cfg.train_fraction)
