"""Nonparametric state-space entropy estimation.

k-nearest-neighbor entropy estimates over particle sets drawn from rollout
states, an importance-weighted variant for off-policy evaluation of the
current policy's state distribution, and their difference as a divergence
estimate used to gate trust-region policy steps.  Also the discretized
visitation grid behind the reported state-entropy metric.

Neighbor search is exact brute force.  Ties are broken by particle index;
exact duplicate points get a deterministic jitter of 1e-10 times the data
range before the search so distances stay positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .betarisk import digamma

_JITTER_SEED = 0x51D3
_JITTER_SCALE = 1e-10
_BLOCK = 256


@dataclass(frozen=True)
class ParticleSet:
    """M points in R^dim, typically states (or a 2-state projection) from rollouts."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise ValueError(f"particles must be a 2-d array, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("particles must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class ImportanceWeightSet:
    """Per-particle nonnegative weights summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be a 1-d array")
        if not np.isfinite(w).all() or (w < 0.0).any():
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, m: int) -> "ImportanceWeightSet":
        return cls(np.full(m, 1.0 / m))


def knn_volume(radius: float, dim: int) -> float:
    """Volume of the dim-ball of the given radius."""
    if radius < 0.0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0) * radius ** dim


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    # blockwise coordinate differences: exactly translation invariant,
    # unlike the matmul expansion of the same quantity
    m = x.shape[0]
    out = np.empty((m, m))
    for s in range(0, m, _BLOCK):
        e = min(s + _BLOCK, m)
        diff = x[s:e, None, :] - x[None, :, :]
        out[s:e] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _knn_search(x: np.ndarray, k: int):
    """Indices of the k nearest neighbors of each point (self excluded).

    Returns (neighbor_idx int[M][k], kth_dist float[M]).  Candidate ties are
    ordered by (distance, index).
    """
    m = x.shape[0]
    d2 = _pairwise_sq_dists(x)
    np.fill_diagonal(d2, np.inf)
    width = min(k + 8, m - 1)
    if width == m - 1:
        cand = np.argsort(d2, axis=1, kind="stable")[:, : m - 1]
    else:
        part = np.argpartition(d2, width - 1, axis=1)[:, :width]
        cd = np.take_along_axis(d2, part, axis=1)
        order = np.lexsort((part, cd), axis=1)
        cand = np.take_along_axis(part, order, axis=1)
    nbr = cand[:, :k]
    kth = np.sqrt(np.take_along_axis(d2, nbr[:, k - 1 : k], axis=1)[:, 0])
    return nbr, kth


class KnnGraph:
    """Frozen neighborhood structure of a particle set.

    Computed once per outer iteration; the inner policy loop only reweights
    particles, so neighbor sets and ball volumes stay valid.
    """

    def __init__(self, ps: ParticleSet, k: int):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if ps.m <= k:
            raise ValueError(f"need more than k={k} particles, got M={ps.m}")
        x = ps.points
        nbr, kth = _knn_search(x, k)
        if (kth == 0.0).any():
            # duplicate points: deterministic jitter scaled by the data range
            rng = np.random.default_rng(_JITTER_SEED)
            span = x.max(axis=0) - x.min(axis=0)
            span = np.where(span > 0.0, span, 1.0)
            x = x + rng.standard_normal(x.shape) * (_JITTER_SCALE * span)
            nbr, kth = _knn_search(x, k)
            if (kth == 0.0).any():
                raise RuntimeError("zero k-th neighbor distance persists after jitter")
        self.m = ps.m
        self.dim = ps.dim
        self.k = k
        self.neighbors = nbr
        self.kth_dist = kth
        # ln V_i, with V_i the volume of the ball reaching the k-th neighbor
        unit = math.pi ** (self.dim / 2.0) / math.gamma(self.dim / 2.0 + 1.0)
        self.log_vol = math.log(unit) + self.dim * np.log(kth)
        self._bias = math.log(k) - digamma(float(k))

    def entropy(self) -> float:
        # H_k = -(1/M) sum_i ln(k / (M V_i)) + ln k - psi(k)
        s = math.log(self.k) - math.log(self.m) - self.log_vol
        return float(-np.mean(s) + self._bias)

    def iw_entropy(self, ws: ImportanceWeightSet) -> float:
        # H_k = -sum_i (W_i / k) ln(W_i / V_i) + ln k - psi(k)
        s = self._iw_sum(ws)
        return float(-s + self._bias)

    def kl_estimate(self, ws: ImportanceWeightSet) -> float:
        # direct difference of the two sums; the ln k - psi(k) bias cancels
        plain = -np.mean(math.log(self.k) - math.log(self.m) - self.log_vol)
        return float(plain + self._iw_sum(ws))

    def _iw_sum(self, ws: ImportanceWeightSet) -> float:
        w = ws.weights
        if w.shape[0] != self.m:
            raise ValueError(f"expected {self.m} weights, got {w.shape[0]}")
        big = w[self.neighbors].sum(axis=1)
        pos = big > 0.0
        terms = np.zeros(self.m)
        terms[pos] = (big[pos] / self.k) * (np.log(big[pos]) - self.log_vol[pos])
        return float(terms.sum())

    def neighbor_weight_sums(self, w: np.ndarray) -> np.ndarray:
        return w[self.neighbors].sum(axis=1)


def knn_entropy(ps: ParticleSet, k: int) -> float:
    """Entropy estimate from k-th nearest neighbor distances."""
    return KnnGraph(ps, k).entropy()


def iw_knn_entropy(ps: ParticleSet, ws: ImportanceWeightSet, k: int) -> float:
    """Importance-weighted entropy estimate.

    With uniform weights this reduces exactly to knn_entropy.
    """
    return KnnGraph(ps, k).iw_entropy(ws)


def knn_kl_estimate(ps: ParticleSet, ws: ImportanceWeightSet, k: int) -> float:
    """Divergence estimate between reweighted and empirical state distributions.

    Computed as knn_entropy minus iw_knn_entropy with both bias terms
    cancelled algebraically; zero at uniform weights, positive as weight
    mass concentrates.
    """
    return KnnGraph(ps, k).kl_estimate(ws)


# ---------------------------------------------------------------------------
# discretized visitation entropy

@dataclass
class VisitationGrid:
    """2-d visit-count histogram over fixed axis ranges.

    Out-of-range states are clipped into the edge bins so every visit counts.
    """

    lo: np.ndarray
    hi: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, lo, hi, bins) -> "VisitationGrid":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        bins = np.asarray(bins, dtype=int)
        if lo.shape != (2,) or hi.shape != (2,) or bins.shape != (2,):
            raise ValueError("grid is 2-d: lo, hi, bins must each have length 2")
        if (hi <= lo).any() or (bins < 1).any():
            raise ValueError("need hi > lo and bins >= 1")
        return cls(lo=lo, hi=hi, counts=np.zeros(tuple(bins), dtype=np.int64))

    @property
    def bins(self) -> tuple:
        return self.counts.shape

    def add(self, pts: np.ndarray) -> None:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[1] != 2:
            raise ValueError("visitation grid takes 2-d points")
        nb = np.asarray(self.counts.shape)
        scaled = (pts - self.lo) / (self.hi - self.lo) * nb
        idx = np.clip(np.floor(scaled).astype(int), 0, nb - 1)
        np.add.at(self.counts, (idx[:, 0], idx[:, 1]), 1)

    def entropy(self) -> float:
        return state_entropy_metric(self)

    def to_csv(self, path) -> None:
        header = (f"# x_lo={float(self.lo[0])!r} x_hi={float(self.hi[0])!r} "
                  f"y_lo={float(self.lo[1])!r} y_hi={float(self.hi[1])!r} "
                  f"x_bins={self.counts.shape[0]} y_bins={self.counts.shape[1]}")
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in self.counts:
                fh.write(",".join(str(int(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "VisitationGrid":
        with open(path) as fh:
            header = fh.readline().strip()
            if not header.startswith("# "):
                raise ValueError(f"{path}: missing grid header line")
            fields = dict(tok.split("=", 1) for tok in header[2:].split())
            lo = np.array([float(fields["x_lo"]), float(fields["y_lo"])])
            hi = np.array([float(fields["x_hi"]), float(fields["y_hi"])])
            rows = [[int(v) for v in line.strip().split(",")]
                    for line in fh if line.strip()]
        counts = np.array(rows, dtype=np.int64)
        want = (int(fields["x_bins"]), int(fields["y_bins"]))
        if counts.shape != want:
            raise ValueError(f"{path}: count block {counts.shape} does not match header {want}")
        return cls(lo=lo, hi=hi, counts=counts)


def state_entropy_metric(grid: VisitationGrid) -> float:
    """Shannon entropy (natural log) of the normalized visit histogram."""
    total = grid.counts.sum()
    if total <= 0:
        raise ValueError("visitation grid is empty")
    p = grid.counts[grid.counts > 0] / float(total)
    return float(-(p * np.log(p)).sum())
