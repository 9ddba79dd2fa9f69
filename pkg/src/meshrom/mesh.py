"""Undirected graph view of an unstructured finite-volume mesh.

Cells are nodes; two cells sharing a face are joined by an edge carrying the
geometric edge feature ``(dx, dy, face_measure, distance)`` where
``(dx, dy) = coords[j] - coords[i]`` for the stored orientation ``i < j``.

Two on-disk formats live here:

* mesh text files (sections ``[format]``, ``[nodes]``, ``[edges]``,
  ``[boundary]``), see :func:`format_mesh`;
* little-endian binary snapshot files with magic ``GLED``, see
  :func:`write_snapshot`.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import FormatError, ValidationError

MESH_FORMAT_VERSION = 1
SNAPSHOT_MAGIC = b"GLED"
SNAPSHOT_VERSION = 1
EDGE_FEATURE_DIM = 4
DEFAULT_FIELDS = ("scalar", "u", "v")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class MeshGraph:
    """Immutable mesh graph ``G = (U, A, E)`` without the node values ``U``."""

    coords: np.ndarray  # (N, 2)
    edges: np.ndarray  # (N_E, 2) int, i < j, lexicographically sorted
    face_measure: np.ndarray  # (N_E,)
    boundary: Mapping[int, str] = field(default_factory=dict)
    allow_components: bool = False

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValidationError(f"coords must have shape (N, 2), got {coords.shape}")
        if coords.shape[0] == 0:
            raise ValidationError("mesh has no nodes")
        if not np.all(np.isfinite(coords)):
            raise ValidationError("non-finite node coordinate")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        face = np.asarray(self.face_measure, dtype=np.float64).reshape(-1)
        if face.shape[0] != edges.shape[0]:
            raise ValidationError("one face measure is required per edge")
        n = coords.shape[0]
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValidationError("edge references a node index out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                k = int(np.flatnonzero(edges[:, 0] == edges[:, 1])[0])
                raise ValidationError(f"self-edge at node {edges[k, 0]}")
            if np.any(edges[:, 0] > edges[:, 1]):
                raise ValidationError("edges must be stored with i < j")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges, face = edges[order], face[order]
            dup = np.all(edges[1:] == edges[:-1], axis=1)
            if np.any(dup):
                k = int(np.flatnonzero(dup)[0])
                raise ValidationError(f"duplicate edge ({edges[k, 0]}, {edges[k, 1]})")
        if not np.all(np.isfinite(face)) or np.any(face < 0):
            raise ValidationError("face measures must be finite and non-negative")
        boundary = {int(k): str(v) for k, v in dict(self.boundary).items()}
        for k in boundary:
            if not 0 <= k < n:
                raise ValidationError(f"boundary tag on unknown node {k}")
        object.__setattr__(self, "coords", _frozen(coords, np.float64))
        object.__setattr__(self, "edges", _frozen(edges, np.int64))
        object.__setattr__(self, "face_measure", _frozen(face, np.float64))
        object.__setattr__(self, "boundary", dict(sorted(boundary.items())))
        if edges.size and np.any(self.edge_features[:, 3] <= 0.0):
            raise ValidationError("two adjacent nodes share a coordinate (zero edge distance)")
        if not self.allow_components and self.n_components != 1:
            raise ValidationError(
                f"graph has {self.n_components} connected components; "
                "pass allow_components=True to permit this"
            )

    @classmethod
    def from_adjacency(cls, coords, adjacency, face_measure, **kw) -> "MeshGraph":
        """Build from a dense binary adjacency and a matching face-measure matrix."""
        a = np.asarray(adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError("adjacency must be square")
        if not np.array_equal(a != 0, (a != 0).T):
            raise ValidationError("adjacency is not symmetric")
        if np.any(np.diag(a) != 0):
            raise ValidationError("adjacency has a self-edge")
        i, j = np.nonzero(np.triu(a != 0, k=1))
        f = np.broadcast_to(np.asarray(face_measure, dtype=np.float64), a.shape)
        return cls(coords, np.stack([i, j], axis=1), f[i, j], **kw)

    # --- derived quantities -------------------------------------------------

    @property
    def node_count(self) -> int:
        return int(self.coords.shape[0])

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    @cached_property
    def edge_features(self) -> np.ndarray:
        i, j = self.edges[:, 0], self.edges[:, 1]
        d = self.coords[j] - self.coords[i]
        dist = np.hypot(d[:, 0], d[:, 1])
        out = np.column_stack([d, self.face_measure, dist])
        out.flags.writeable = False
        return out

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n, i, j = self.node_count, self.edges[:, 0], self.edges[:, 1]
        ones = np.ones(2 * self.edge_count, dtype=np.int8)
        a = sp.csr_matrix((ones, (np.r_[i, j], np.r_[j, i])), shape=(n, n))
        a.sort_indices()
        return a

    @cached_property
    def n_components(self) -> int:
        return int(connected_components(self.adjacency, directed=False)[0])

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def directed_edges(self):
        """Both orientations of every edge.

        Returns ``(src, dst, features)`` with the first ``N_E`` rows in stored
        orientation and the next ``N_E`` reversed (displacement negated).
        """
        i, j = self.edges[:, 0], self.edges[:, 1]
        fwd = self.edge_features
        rev = fwd.copy()
        rev[:, :2] *= -1.0
        return np.r_[i, j], np.r_[j, i], np.vstack([fwd, rev])

    def median_edge_distance(self) -> float:
        if self.edge_count == 0:
            raise ValidationError("graph has no edges")
        return float(np.median(self.edge_features[:, 3]))

    def same_as(self, other: "MeshGraph") -> bool:
        return (
            np.array_equal(self.coords, other.coords)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.face_measure, other.face_measure)
            and self.boundary == other.boundary
        )

    def content_hash(self) -> str:
        return hashlib.sha256(format_mesh(self).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class FieldSnapshot:
    """Per-node field values ``(N_u, N)`` at one time point."""

    values: np.ndarray
    field_names: tuple = DEFAULT_FIELDS
    time: float = 0.0
    param: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"snapshot values must be 2-D (N_u, N), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("snapshot contains non-finite values")
        names = tuple(str(s) for s in self.field_names)
        if len(names) != v.shape[0]:
            raise ValidationError(f"{len(names)} field names for {v.shape[0]} field rows")
        object.__setattr__(self, "values", _frozen(v, np.float64))
        object.__setattr__(self, "field_names", names)
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "param", _frozen(np.atleast_1d(np.asarray(self.param, float)), np.float64))

    @property
    def n_fields(self) -> int:
        return int(self.values.shape[0])

    @property
    def node_count(self) -> int:
        return int(self.values.shape[1])

    def field(self, name: str) -> np.ndarray:
        try:
            return self.values[self.field_names.index(name)]
        except ValueError:
            raise ValidationError(f"field {name!r} not present (have {list(self.field_names)})") from None

    def check_against(self, g: MeshGraph) -> None:
        if self.node_count != g.node_count:
            raise ValidationError(
                f"snapshot has {self.node_count} node columns, mesh has {g.node_count} nodes"
            )


# --- queries ----------------------------------------------------------------


def neighbors(g: MeshGraph, i: int) -> list[int]:
    """Adjacent node indices of ``i`` in ascending order."""
    if not 0 <= i < g.node_count:
        raise IndexError(f"node index {i} out of range [0, {g.node_count})")
    a = g.adjacency
    return a.indices[a.indptr[i]:a.indptr[i + 1]].tolist()


def permute_nodes(g: MeshGraph, s: FieldSnapshot | None, perm: Sequence[int]):
    """Relabel nodes so that old node ``i`` becomes node ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    n = g.node_count
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValidationError("perm is not a bijection over node indices")
    coords = np.empty_like(g.coords)
    coords[perm] = g.coords
    e = perm[g.edges]
    e.sort(axis=1)
    boundary = {int(perm[k]): v for k, v in g.boundary.items()}
    g2 = MeshGraph(coords, e, g.face_measure, boundary, allow_components=g.allow_components)
    if s is None:
        return g2, None
    vals = np.empty_like(s.values)
    vals[:, perm] = s.values
    return g2, FieldSnapshot(vals, s.field_names, s.time, s.param)


# --- mesh text format ---------------------------------------------------------


def format_mesh(g: MeshGraph) -> str:
    lines = ["# unstructured mesh graph", "[format]", f"version {MESH_FORMAT_VERSION}", "[nodes]"]
    lines += [f"{k} {x!r} {y!r}" for k, (x, y) in enumerate(g.coords.tolist())]
    lines.append("[edges]")
    lines += [f"{i} {j} {f!r}" for (i, j), f in zip(g.edges.tolist(), g.face_measure.tolist())]
    lines.append("[boundary]")
    lines += [f"{k} {tag}" for k, tag in g.boundary.items()]
    return "\n".join(lines) + "\n"


def parse_mesh(text: str, *, allow_components: bool = False, path=None) -> MeshGraph:
    section = None
    version = None
    nodes: dict[int, tuple[float, float]] = {}
    edges, faces = [], []
    boundary: dict[int, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise FormatError(f"malformed section header {line!r}", lineno, path)
            section = line[1:-1].strip()
            if section not in ("format", "nodes", "edges", "boundary"):
                raise FormatError(f"unknown section [{section}]", lineno, path)
            continue
        parts = line.split()
        try:
            if section == "format":
                if parts[0] != "version" or len(parts) != 2:
                    raise ValueError
                version = int(parts[1])
            elif section == "nodes":
                if len(parts) != 3:
                    raise ValueError
                k = int(parts[0])
                if k in nodes:
                    raise FormatError(f"node {k} defined twice", lineno, path)
                nodes[k] = (float(parts[1]), float(parts[2]))
            elif section == "edges":
                if len(parts) != 3:
                    raise ValueError
                edges.append((int(parts[0]), int(parts[1])))
                faces.append(float(parts[2]))
            elif section == "boundary":
                if len(parts) != 2:
                    raise ValueError
                boundary[int(parts[0])] = parts[1]
            else:
                raise FormatError("data before any section header", lineno, path)
        except FormatError:
            raise
        except (ValueError, IndexError):
            raise FormatError(f"cannot parse {section} line {raw.strip()!r}", lineno, path) from None
    if version is not None and version != MESH_FORMAT_VERSION:
        raise FormatError(f"unsupported mesh format version {version}", None, path)
    n = len(nodes)
    if n == 0:
        raise FormatError("no [nodes] entries", None, path)
    if sorted(nodes) != list(range(n)):
        raise FormatError("node ids must be exactly 0..N-1", None, path)
    coords = np.array([nodes[k] for k in range(n)], dtype=np.float64)
    return MeshGraph(coords, np.array(edges, dtype=np.int64).reshape(-1, 2), faces, boundary,
                     allow_components=allow_components)


def build_graph(mesh_file, *, allow_components: bool = False) -> MeshGraph:
    """Parse a mesh text file into a validated :class:`MeshGraph`."""
    path = Path(mesh_file)
    return parse_mesh(path.read_text(), allow_components=allow_components, path=path)


def write_mesh(g: MeshGraph, path) -> None:
    Path(path).write_text(format_mesh(g))


# --- snapshot binary format ---------------------------------------------------

_SNAP_HEAD = struct.Struct("<4sIIIdI")


def snapshot_bytes(s: FieldSnapshot) -> bytes:
    head = _SNAP_HEAD.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, s.node_count, s.n_fields,
                           s.time, s.param.size)
    return head + s.param.astype("<f8").tobytes() + np.ascontiguousarray(s.values, "<f8").tobytes()


def snapshot_from_bytes(buf: bytes, field_names=None, path=None) -> FieldSnapshot:
    if len(buf) < _SNAP_HEAD.size:
        raise FormatError("truncated snapshot header", path=path)
    magic, version, n, nu, t, npar = _SNAP_HEAD.unpack_from(buf, 0)
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"bad snapshot magic {magic!r}", path=path)
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"unsupported snapshot version {version}", path=path)
    off = _SNAP_HEAD.size
    expected = off + 8 * npar + 8 * n * nu
    if len(buf) != expected:
        raise FormatError(f"snapshot payload is {len(buf)} bytes, expected {expected}", path=path)
    param = np.frombuffer(buf, "<f8", npar, off)
    values = np.frombuffer(buf, "<f8", n * nu, off + 8 * npar).reshape(nu, n)
    if field_names is None:
        field_names = DEFAULT_FIELDS if nu == 3 else tuple(f"f{k}" for k in range(nu))
    return FieldSnapshot(values, field_names, t, param)


def write_snapshot(s: FieldSnapshot, path) -> None:
    Path(path).write_bytes(snapshot_bytes(s))


def read_snapshot(path, field_names=None) -> FieldSnapshot:
    return snapshot_from_bytes(Path(path).read_bytes(), field_names, path=path)
