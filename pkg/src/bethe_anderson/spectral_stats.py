"""Level statistics: rescaled processes, gap ratios, spacings, participation.

The gap ratio ``r_n = min(s_n, s_{n+1}) / max(s_n, s_{n+1})`` needs no
unfolding and is the primary Poisson/GOE discriminant.  Spacing histograms
are unfolded with the empirical integrated density pooled over the
ensemble.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csgraph

from .disorder import DisorderSpec
from .errors import DomainError, StatisticsWarning
from .finite_graphs import (
    FiniteGraph,
    SpectralDecomposition,
    assemble_hamiltonian,
    build_random_regular,
    build_truncated_tree,
    diagonalize,
    realize,
)
from .parallel import ordered_map
from .rng import RngHandle, derive

POISSON_R = 2.0 * math.log(2.0) - 1.0
GOE_R = 0.5307
DEGENERATE = 1e-12
MIN_SPACINGS = 1000


def _levels(eigs) -> np.ndarray:
    if isinstance(eigs, SpectralDecomposition):
        return eigs.eigenvalues
    return np.sort(np.asarray(eigs, dtype=float))


@dataclass(frozen=True)
class RescaledProcess:
    center_energy: float
    points: np.ndarray = field(repr=False)
    window_halfwidth: float
    volume: int

    def __len__(self):
        return int(self.points.size)


def rescale(eigs, E: float, volume: int, W: float) -> RescaledProcess:
    """Points ``volume * (E_n - E)`` with absolute value at most ``W``."""
    if not W > 0:
        raise DomainError("window halfwidth W must be positive")
    p = volume * (_levels(eigs) - E)
    return RescaledProcess(float(E), p[np.abs(p) <= W], float(W), int(volume))


def bulk_levels(eigs, fraction: float = 0.4, exclude_zero: float = 0.0) -> np.ndarray:
    """Central ``fraction`` of the levels by rank.

    ``exclude_zero`` removes that fraction of all levels, by rank, around
    the spectral median (used for bipartite graphs, whose spectra are
    symmetric about 0).
    """
    lv = _levels(eigs)
    n = lv.size
    lo, hi = int(round(n * (0.5 - fraction / 2))), int(round(n * (0.5 + fraction / 2)))
    idx = np.arange(lo, hi)
    if exclude_zero > 0:
        mid = np.searchsorted(lv, 0.0)
        idx = idx[np.abs(idx - mid) >= exclude_zero * n / 2]
    return lv[idx]


def is_bipartite(g: FiniteGraph) -> bool:
    if g.is_tree:
        return True
    A = g.adjacency()
    _, labels = csgraph.connected_components(A, directed=False)
    color = np.full(g.n_vertices, -1)
    for comp in np.unique(labels):
        root = int(np.flatnonzero(labels == comp)[0])
        d = csgraph.shortest_path(A, unweighted=True, indices=root, directed=False)
        member = labels == comp
        color[member] = d[member].astype(int) % 2
    u, v = g.edges[:, 0], g.edges[:, 1]
    return bool(np.all(color[u] != color[v]))


@dataclass(frozen=True)
class GapStatistics:
    mean_gap_ratio: float
    std_error: float
    n_gaps: int
    n_degenerate: int
    spacing_histogram: tuple = field(repr=False)  # (edges, density) of r

    def __post_init__(self):
        if not (0.0 <= self.mean_gap_ratio <= 1.0 or math.isnan(self.mean_gap_ratio)):
            raise DomainError("mean gap ratio outside [0, 1]")


def gap_ratios(levels) -> tuple[np.ndarray, int]:
    """Ratios of consecutive spacings of one sorted level set."""
    s = np.diff(np.sort(np.asarray(levels, dtype=float)))
    a, b = s[:-1], s[1:]
    big = np.maximum(a, b)
    small = np.minimum(a, b)
    degenerate = small < DEGENERATE * np.maximum(1.0, np.abs(levels).max() if len(levels) else 1.0)
    r = np.where(big > 0, small / np.where(big > 0, big, 1.0), 0.0)
    r[degenerate] = 0.0
    return r, int(np.count_nonzero(degenerate))


def gap_ratio(spectra, bins: int = 20) -> GapStatistics:
    """Gap-ratio statistics of one spectrum or a list of spectra.

    With several spectra each one is a batch for the standard error (a
    ratio estimator weighted by gap count); a single spectrum is cut into
    ten contiguous batches.
    """
    single = (SpectralDecomposition, RescaledProcess)
    if isinstance(spectra, single) or (not isinstance(spectra[0], single) and np.ndim(spectra[0]) == 0):
        spectra = [spectra]
    parts, ndeg = [], 0
    for sp in spectra:
        lv = sp.points if isinstance(sp, RescaledProcess) else _levels(sp)
        if lv.size >= 3:
            r, d = gap_ratios(lv)
            parts.append(r)
            ndeg += d
    n = sum(p.size for p in parts)
    if n < 1:
        raise DomainError("need at least two spacings")
    if ndeg:
        warnings.warn(f"{ndeg} degenerate spacings counted with r = 0", StatisticsWarning, stacklevel=2)
    allr = np.concatenate(parts)
    mean = float(allr.mean())
    if len(parts) == 1:
        parts = [b for b in np.array_split(allr, min(10, n)) if b.size]
    B = len(parts)
    if B > 1:
        w = np.array([p.size for p in parts], dtype=float)
        m = np.array([p.mean() for p in parts])
        se = math.sqrt(np.sum((w / w.mean()) ** 2 * (m - mean) ** 2) / (B * (B - 1)))
    else:
        se = math.inf
    dens, edges = np.histogram(allr, bins=bins, range=(0.0, 1.0), density=True)
    return GapStatistics(mean, se, n, ndeg, (edges, dens))


# --------------------------------------------------------------------------
# spacings


def poisson_cdf(s):
    return 1.0 - np.exp(-np.asarray(s, float))


def wigner_cdf(s):
    return 1.0 - np.exp(-math.pi * np.asarray(s, float) ** 2 / 4.0)


def wigner_density(s):
    s = np.asarray(s, float)
    return 0.5 * math.pi * s * np.exp(-math.pi * s * s / 4.0)


def unfold(spectra, degree: int = 9) -> list[np.ndarray]:
    """Map each spectrum through the pooled integrated density.

    The staircase of all levels pooled, divided by the number of spectra,
    is smoothed by a Chebyshev fit; unfolded levels then have unit mean
    spacing.  Interpolating the raw pooled staircase instead would bias
    small ensembles, since each spectrum's own levels are steps of it.
    """
    spectra = [np.sort(np.asarray(s, float)) for s in spectra]
    pooled = np.sort(np.concatenate(spectra))
    if pooled.size < 3 or pooled[-1] == pooled[0]:
        return [s.copy() for s in spectra]
    lo, hi = pooled[0], pooled[-1]
    x = 2.0 * (pooled - lo) / (hi - lo) - 1.0
    rank = (np.arange(pooled.size, dtype=float) + 0.5) / len(spectra)
    coef = np.polynomial.chebyshev.chebfit(x, rank, min(degree, pooled.size - 1))
    return [np.polynomial.chebyshev.chebval(2.0 * (s - lo) / (hi - lo) - 1.0, coef) for s in spectra]


@dataclass(frozen=True)
class SpacingHistogram:
    edges: np.ndarray = field(repr=False)
    density: np.ndarray = field(repr=False)
    n_spacings: int
    n_merged: int
    mean_spacing: float
    tv_poisson: float
    tv_goe: float

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def to_csv(self, path) -> None:
        np.savetxt(
            path, np.stack([self.centers, self.density], axis=1), delimiter=",", fmt="%.17g",
            header="bin_center,density", comments="",
        )


def tv_distance(spacings, edges, cdf) -> float:
    """Total variation between binned ``spacings`` and a reference law."""
    spacings = np.asarray(spacings, float)
    n = spacings.size
    counts, _ = np.histogram(spacings, bins=edges)
    emp = counts / n
    ref = np.diff(cdf(edges))
    emp_tail = 1.0 - emp.sum()
    ref_tail = 1.0 - ref.sum()
    return 0.5 * float(np.abs(emp - ref).sum() + abs(emp_tail - ref_tail))


def spacing_distribution(spectra, bins=None, unfolded: bool = False) -> SpacingHistogram:
    """Histogram of unfolded nearest-neighbour spacings.

    Raw spacings below ``1e-12`` are merged (dropped) and counted.
    """
    edges = np.linspace(0.0, 4.0, 41) if bins is None else np.asarray(bins, float)
    if np.ndim(spectra[0]) == 0:
        spectra = [spectra]
    merged = 0
    clean = []
    for sp in spectra:
        lv = np.sort(np.asarray(sp, float))
        if lv.size < 2:
            continue
        keep = np.concatenate([[True], np.diff(lv) >= DEGENERATE])
        merged += int(np.count_nonzero(~keep))
        clean.append(lv[keep])
    if not clean:
        raise DomainError("need at least two levels")
    levels = clean if unfolded else unfold(clean)
    s = np.concatenate([np.diff(u) for u in levels])
    if s.size < MIN_SPACINGS:
        warnings.warn(f"only {s.size} spacings pooled", StatisticsWarning, stacklevel=2)
    counts, _ = np.histogram(s, bins=edges)
    dens = counts / (s.size * np.diff(edges))
    return SpacingHistogram(
        edges, dens, int(s.size), merged, float(s.mean()),
        tv_distance(s, edges, poisson_cdf), tv_distance(s, edges, wigner_cdf),
    )


def participation_ratio(vec) -> float:
    v = np.asarray(vec)
    norm = float(np.sum(np.abs(v) ** 2))
    if abs(math.sqrt(norm) - 1.0) > 1e-8:
        raise DomainError(f"vector is not normalized (norm {math.sqrt(norm):.3g})")
    return 1.0 / float(np.sum(np.abs(v) ** 4))


def participation_ratios(V: np.ndarray) -> np.ndarray:
    """Participation ratio of every column of an orthonormal matrix."""
    return 1.0 / np.sum(np.abs(V) ** 4, axis=0)


# --------------------------------------------------------------------------
# reference ensembles


def poisson_levels(n: int, gen: np.random.Generator) -> np.ndarray:
    return np.cumsum(gen.exponential(size=n))


def goe_spectrum(N: int, gen: np.random.Generator) -> np.ndarray:
    A = gen.standard_normal((N, N))
    return np.linalg.eigvalsh((A + A.T) / 2.0)


def goe_reference_r(rng: RngHandle, N: int = 400, n_realizations: int = 100) -> GapStatistics:
    """Gap ratio of the middle third of GOE spectra."""
    spectra = []
    for i in range(n_realizations):
        w = goe_spectrum(N, derive(rng, [i]).generator())
        spectra.append(w[N // 3 : 2 * N // 3])
    return gap_ratio(spectra)


# --------------------------------------------------------------------------
# experiments


def classify(stats: GapStatistics, tol: float = 0.02, max_se: float = 0.01) -> str:
    """``"poisson"``, ``"goe"``, ``"intermediate"`` or ``"inconclusive"``."""
    if stats.n_gaps < MIN_SPACINGS or not stats.std_error <= max_se:
        return "inconclusive"
    for name, ref in (("poisson", POISSON_R), ("goe", GOE_R)):
        if abs(stats.mean_gap_ratio - ref) <= tol + 2.0 * stats.std_error:
            return name
    return "intermediate"


@dataclass
class PoissonTestConfig:
    K: int = 2
    L: int = 9
    lam: float = 1.0
    disorder: DisorderSpec = field(default_factory=DisorderSpec.cauchy)
    centers: tuple = (0.0, 2.9)
    window: float = 0.25  # physical halfwidth; W = window * |T_L|
    n_realizations: int = 200
    rng: RngHandle = field(default_factory=lambda: RngHandle(0))
    workers: int | None = None


def _tree_task(args):
    K, L, lam, disorder, rng = args
    g = build_truncated_tree(K, L, "rooted")
    real = realize(g, disorder, lam, rng)
    return diagonalize(assemble_hamiltonian(g, real), vectors=False).eigenvalues


def poisson_test_truncated_tree(cfg: PoissonTestConfig) -> list[dict]:
    """Gap ratio and spacing law of rescaled T_L spectra at each center.

    Realization ``i`` uses stream ``cfg.rng / i``.
    """
    g = build_truncated_tree(cfg.K, cfg.L, "rooted")
    volume = g.n_vertices
    tasks = [(cfg.K, cfg.L, cfg.lam, cfg.disorder, derive(cfg.rng, [i])) for i in range(cfg.n_realizations)]
    spectra = ordered_map(_tree_task, tasks, cfg.workers)
    rows = []
    for E in cfg.centers:
        procs = [rescale(w, E, volume, cfg.window * volume) for w in spectra]
        n_pts = np.array([len(p) for p in procs])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if n_pts.sum() < 3 * len(procs):
                warnings.warn("too few levels in the window", StatisticsWarning)
            try:
                st = gap_ratio(procs)
                hist = spacing_distribution([p.points for p in procs if len(p) >= 2])
            except DomainError:
                st = GapStatistics(math.nan, math.inf, 0, 0, None)
                hist = None
        for w in caught:
            warnings.warn(w.message, w.category, stacklevel=2)
        rows.append(
            {
                "K": cfg.K, "lambda": cfg.lam, "E": float(E), "L": cfg.L, "volume": volume,
                "n_realizations": cfg.n_realizations, "mean_points": float(n_pts.mean()),
                "mean_r": st.mean_gap_ratio, "se_r": st.std_error, "n_gaps": st.n_gaps,
                "tv_poisson": hist.tv_poisson if hist else math.nan,
                "tv_goe": hist.tv_goe if hist else math.nan, "label": classify(st), "seed": cfg.rng.master_seed,
            }
        )
    return rows


@dataclass
class RRGScanConfig:
    K: int = 2
    N: int = 2000
    points: tuple = ((0.0, None),)  # (lambda, E); E=None means the bulk window
    disorder: DisorderSpec = field(default_factory=DisorderSpec.uniform)
    n_realizations: int = 50
    bulk_fraction: float = 0.4
    window: float = 0.1  # physical halfwidth when E is given
    participation: bool = True
    rng: RngHandle = field(default_factory=lambda: RngHandle(0))
    workers: int | None = None


def _select(levels, E, cfg, bipartite):
    if E is None:
        return bulk_levels(levels, cfg.bulk_fraction, 0.05 if bipartite else 0.0)
    return levels[np.abs(levels - E) <= cfg.window]


def _rrg_task(args):
    cfg, lam, E, rng = args
    g = build_random_regular(cfg.K, cfg.N, derive(rng, [0]))
    real = realize(g, cfg.disorder, lam, derive(rng, [1]))
    dec = diagonalize(assemble_hamiltonian(g, real), vectors=cfg.participation)
    bip = lam == 0 and is_bipartite(g)
    sel = _select(dec.eigenvalues, E, cfg, bip)
    pr = None
    if cfg.participation:
        mask = np.isin(dec.eigenvalues, sel)
        pr = participation_ratios(dec.eigenvectors[:, mask]) / cfg.N
    return sel, pr


def rrg_statistics_scan(cfg: RRGScanConfig) -> list[dict]:
    """Gap ratio, spacing distances and participation on random regular graphs.

    Point ``j`` and realization ``i`` use stream ``cfg.rng / j / i``; the
    graph and the potential use sub-streams 0 and 1.
    """
    rows = []
    for j, (lam, E) in enumerate(cfg.points):
        tasks = [(cfg, float(lam), E, derive(cfg.rng, [j, i])) for i in range(cfg.n_realizations)]
        out = ordered_map(_rrg_task, tasks, cfg.workers)
        spectra = [o[0] for o in out if o[0].size >= 3]
        st = gap_ratio(spectra)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StatisticsWarning)
            hist = spacing_distribution(spectra)
        med_pr = float(np.median(np.concatenate([o[1] for o in out]))) if cfg.participation else math.nan
        rows.append(
            {
                "K": cfg.K, "lambda": float(lam), "E": "bulk" if E is None else float(E), "N": cfg.N,
                "n_realizations": cfg.n_realizations, "mean_r": st.mean_gap_ratio, "se_r": st.std_error,
                "n_gaps": st.n_gaps, "tv_poisson": hist.tv_poisson, "tv_goe": hist.tv_goe,
                "median_pr_fraction": med_pr, "label": classify(st), "seed": cfg.rng.master_seed,
            }
        )
    return rows
