"""Latent point selection and k-nearest-neighbour inverse-distance transfer."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import FormatError, ValidationError

DEFAULT_K = 3
DIST_EPS = 1e-8
COINCIDENT_TOL = 1e-12
BRUTE_FORCE_LIMIT = 50_000


@dataclass(frozen=True, eq=False)
class CoordSet:
    points: np.ndarray  # (n, 2)
    provenance: str = "full_mesh"  # or "sampled"
    source_index: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
            raise ValidationError(f"coordinate set must be a nonempty (n, 2) array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("coordinate set contains non-finite values")
        if self.provenance not in ("full_mesh", "sampled"):
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        if pts.shape[0] > 1 and cKDTree(pts).query_pairs(COINCIDENT_TOL):
            raise ValidationError("coordinate set contains coincident points")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.source_index is not None:
            idx = np.array(self.source_index, dtype=np.int64)
            if idx.shape != (pts.shape[0],):
                raise ValidationError("source_index must have one entry per point")
            idx.flags.writeable = False
            object.__setattr__(self, "source_index", idx)

    def __len__(self):
        return int(self.points.shape[0])

    def same_as(self, other: "CoordSet") -> bool:
        return np.array_equal(self.points, other.points)


def farthest_point_sample(src: CoordSet, m: int, seed: int = 0, start: int | None = None) -> CoordSet:
    """Greedy max-min-distance subset of ``m`` points.

    The first point is ``start`` if given, otherwise drawn from ``seed``.
    Ties go to the lowest source index. The result is ordered by source index.
    """
    n = len(src)
    if not 1 <= m <= n:
        raise ValidationError(f"sample size {m} outside [1, {n}]")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    if not 0 <= start < n:
        raise ValidationError(f"start index {start} out of range")
    pts = src.points
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    mind = np.hypot(*(pts - pts[start]).T)
    for k in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[k] = nxt
        np.minimum(mind, np.hypot(*(pts - pts[nxt]).T), out=mind)
    chosen.sort()
    base = chosen if src.source_index is None else src.source_index[chosen]
    return CoordSet(pts[chosen], "sampled", base)


def _knn_brute(src, dst, k):
    """Indices and distances of the k nearest sources per destination.

    Ties at the k-th distance are broken by source (x, y), which keeps the
    selection independent of source ordering.
    """
    nd, ns = dst.shape[0], src.shape[0]
    idx = np.empty((nd, k), dtype=np.int64)
    dist = np.empty((nd, k))
    chunk = max(1, 4_000_000 // ns)
    for lo in range(0, nd, chunk):
        hi = min(nd, lo + chunk)
        d = np.hypot(dst[lo:hi, None, 0] - src[None, :, 0], dst[lo:hi, None, 1] - src[None, :, 1])
        if k < ns:
            part = np.argpartition(d, k - 1, axis=1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(ns), (hi - lo, ns)).copy()
        pd = np.take_along_axis(d, part, axis=1)
        kth = pd.max(axis=1)
        n_le = np.count_nonzero(d <= kth[:, None], axis=1)
        for r in range(hi - lo):
            if n_le[r] > k:
                cand = np.flatnonzero(d[r] <= kth[r])
                part[r] = cand[np.lexsort((src[cand, 1], src[cand, 0], d[r, cand]))][:k]
            else:
                cand = part[r]
                part[r] = cand[np.lexsort((src[cand, 1], src[cand, 0], d[r, cand]))]
        idx[lo:hi] = part
        dist[lo:hi] = np.take_along_axis(d, part, axis=1)
    return idx, dist


def interpolation_matrix(src: CoordSet, dst: CoordSet, k: int = DEFAULT_K,
                         eps: float = DIST_EPS) -> sp.csr_matrix:
    """Sparse ``(|dst|, |src|)`` inverse-distance weight matrix."""
    ns = len(src)
    if k < 1 or k > ns:
        raise ValidationError(f"k={k} outside [1, {ns}]")
    if ns > BRUTE_FORCE_LIMIT:
        dist, idx = cKDTree(src.points).query(dst.points, k=k)
        dist, idx = dist.reshape(len(dst), k), idx.reshape(len(dst), k)
    else:
        idx, dist = _knn_brute(src.points, dst.points, k)
    w = 1.0 / (dist + eps)
    w /= w.sum(axis=1, keepdims=True)
    hit = dist[:, 0] < COINCIDENT_TOL
    if np.any(hit):
        w[hit] = 0.0
        w[hit, 0] = 1.0
    rows = np.repeat(np.arange(len(dst)), k)
    mat = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(len(dst), ns))
    mat.sort_indices()
    return mat


def knn_interpolate(src: CoordSet, src_values, dst: CoordSet, k: int = DEFAULT_K,
                    eps: float = DIST_EPS) -> np.ndarray:
    """Transfer ``(d, |src|)`` values onto ``dst``; returns ``(d, |dst|)``."""
    vals = np.asarray(src_values, dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[None, :]
    if vals.shape[1] != len(src):
        raise ValidationError(f"values have {vals.shape[1]} columns for {len(src)} source points")
    if not np.all(np.isfinite(vals)):
        raise ValidationError("non-finite source values")
    mat = interpolation_matrix(src, dst, k, eps)
    return np.asarray((mat @ vals.T).T)


# --- persisted latent point set ---------------------------------------------


def format_latent_points(cs: CoordSet) -> str:
    idx = cs.source_index if cs.source_index is not None else np.arange(len(cs))
    lines = ["[latent_points]"]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in zip(idx.tolist(), cs.points.tolist())]
    return "\n".join(lines) + "\n"


def parse_latent_points(text: str, path=None) -> CoordSet:
    seen_header = False
    idx, pts = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[latent_points]":
            seen_header = True
            continue
        if not seen_header:
            raise FormatError("expected [latent_points] header", lineno, path)
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            idx.append(int(parts[0]))
            pts.append((float(parts[1]), float(parts[2])))
        except ValueError:
            raise FormatError(f"cannot parse latent point {raw.strip()!r}", lineno, path) from None
    if not pts:
        raise FormatError("no latent points", None, path)
    return CoordSet(np.array(pts), "sampled", np.array(idx))


def write_latent_points(cs: CoordSet, path) -> None:
    Path(path).write_text(format_latent_points(cs))


def read_latent_points(path) -> CoordSet:
    p = Path(path)
    return parse_latent_points(p.read_text(), path=p)
