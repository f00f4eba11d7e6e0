"""Finite trees and random regular graphs: Hamiltonians, resolvents, spectra.

Trees are stored in breadth-first order with vertex 0 as the root, a
``parent`` array (``-1`` at the root) and the graph distance to the root,
so recursions over the tree vectorize level by level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .disorder import DisorderSpec
from .errors import DomainError, SamplingError, SizeError
from .exact_forms import check_K
from .rng import RngHandle, derive

MAX_VERTICES = 10**7
DENSE_CAP = 4000


@dataclass(frozen=True, eq=False)
class FiniteGraph:
    n_vertices: int
    edges: np.ndarray = field(repr=False)
    kind: str  # "rooted_tree", "ball", "random_regular" or "custom"
    K: int | None = None
    L: int | None = None
    seed: int | None = None
    parent: np.ndarray | None = field(default=None, repr=False)
    distances: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_tree(self) -> bool:
        return self.parent is not None

    def levels(self) -> list[np.ndarray]:
        """Vertex indices grouped by distance from the root."""
        if self.distances is None:
            raise DomainError("graph has no root distances")
        order = np.argsort(self.distances, kind="stable")
        cuts = np.searchsorted(self.distances[order], np.arange(self.distances.max() + 2))
        return [order[cuts[i] : cuts[i + 1]] for i in range(len(cuts) - 1)]

    def sphere(self, R: int) -> np.ndarray:
        return np.flatnonzero(self.distances == R)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_vertices)

    def adjacency(self) -> sparse.csr_matrix:
        n = self.n_vertices
        if self.edges.size == 0:
            return sparse.csr_matrix((n, n))
        u, v = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * u.size)
        return sparse.csr_matrix((data, (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(n, n))

    def header(self) -> str:
        size = f"L={self.L}" if self.L is not None else f"N={self.n_vertices}"
        return f"# kind={self.kind},K={self.K},{size},seed={self.seed}"

    def to_csv(self, path) -> None:
        """Edge list with a one-line header."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.header() + "\n")
            for u, v in self.edges:
                fh.write(f"{u},{v}\n")

    @classmethod
    def from_csv(cls, path) -> "FiniteGraph":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        meta = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split(","))
        edges = np.array([[int(x) for x in ln.split(",")] for ln in lines[1:] if ln.strip()], dtype=np.int64)
        edges = edges.reshape(-1, 2)

        def opt(key):
            val = meta.get(key, "None")
            return None if val == "None" else int(val)

        kind = meta["kind"]
        K, L = opt("K"), opt("L")
        if kind in ("rooted_tree", "ball"):
            return build_truncated_tree(K, L, "rooted" if kind == "rooted_tree" else "ball")
        n = int(meta["N"]) if "N" in meta else int(edges.max()) + 1
        return cls(n, edges, kind, K, None, opt("seed"))


def tree_size(K: int, L: int, flavor: str = "rooted") -> int:
    if flavor == "rooted":
        return (K ** (L + 1) - 1) // (K - 1)
    return 1 + (K + 1) * (K**L - 1) // (K - 1)


def build_truncated_tree(K: int, L: int, flavor: str = "rooted") -> FiniteGraph:
    """Ball of radius ``L`` around the root.

    ``flavor="rooted"``: every vertex above depth ``L`` has ``K`` children
    (the rooted tree T_L).  ``flavor="ball"``: the root has ``K + 1``
    neighbors, as in the Bethe lattice.
    """
    K = check_K(K)
    if L < 0:
        raise DomainError("depth L must be >= 0")
    if flavor not in ("rooted", "ball"):
        raise DomainError(f"unknown tree flavor {flavor!r}")
    n = tree_size(K, L, flavor)
    if n > MAX_VERTICES:
        raise SizeError(f"tree with {n} vertices exceeds the cap {MAX_VERTICES}")
    parent = np.full(n, -1, dtype=np.int64)
    dist = np.zeros(n, dtype=np.int64)
    start, width, nxt = 0, 1, 1
    for depth in range(1, L + 1):
        branch = K + 1 if (flavor == "ball" and depth == 1) else K
        kids = width * branch
        parent[nxt : nxt + kids] = np.repeat(np.arange(start, start + width), branch)
        dist[nxt : nxt + kids] = depth
        start, width, nxt = nxt, kids, nxt + kids
    child = np.arange(1, n)
    edges = np.stack([parent[1:], child], axis=1)
    kind = "rooted_tree" if flavor == "rooted" else "ball"
    return FiniteGraph(n, edges, kind, K, L, None, parent, dist)


def build_random_regular(K: int, N: int, rng, max_retries: int = 10_000) -> FiniteGraph:
    """Uniform simple ``(K+1)``-regular graph by pairing with full restarts."""
    K = check_K(K)
    d = K + 1
    if (N * d) % 2:
        raise DomainError("N * (K + 1) must be even")
    if N <= d:
        raise DomainError("need N > K + 1")
    handle = rng if isinstance(rng, RngHandle) else None
    gen = rng.generator() if handle is not None else rng
    stubs = np.repeat(np.arange(N, dtype=np.int64), d)
    for _ in range(max_retries):
        pairs = gen.permutation(stubs).reshape(-1, 2)
        u, v = pairs.min(axis=1), pairs.max(axis=1)
        if np.any(u == v):
            continue
        keys = u * N + v
        if np.unique(keys).size != keys.size:
            continue
        edges = np.stack([u, v], axis=1)
        edges = edges[np.argsort(keys, kind="stable")]
        seed = handle.master_seed if handle is not None else None
        return FiniteGraph(N, edges, "random_regular", K, None, seed)
    raise SamplingError(f"no simple pairing found after {max_retries} attempts (N={N}, degree={d})")


@dataclass(frozen=True, eq=False)
class DisorderRealization:
    graph: FiniteGraph = field(repr=False)
    potential: np.ndarray = field(repr=False)
    lam: float
    seed: tuple | None = None

    def __post_init__(self):
        if self.potential.shape != (self.graph.n_vertices,):
            raise DomainError("potential length must equal the number of vertices")


def realize(graph: FiniteGraph, disorder: DisorderSpec, lam: float, rng: RngHandle) -> DisorderRealization:
    omega = disorder.sample(rng, graph.n_vertices)
    return DisorderRealization(graph, omega, float(lam), (rng.master_seed,) + rng.path)


def assemble_hamiltonian(g: FiniteGraph, real: DisorderRealization | None = None) -> sparse.csr_matrix:
    """``H = T + lam V`` with ``T = -adjacency``."""
    H = -g.adjacency()
    if real is not None:
        if real.graph.n_vertices != g.n_vertices:
            raise DomainError("realization does not match the graph")
        H = H + sparse.diags(real.lam * real.potential)
    return H.tocsr()


# --------------------------------------------------------------------------
# exact tree resolvents


def _diag(g: FiniteGraph, real: DisorderRealization | None) -> np.ndarray:
    if real is None:
        return np.zeros(g.n_vertices)
    return real.lam * real.potential


def tree_gammas(g: FiniteGraph, real: DisorderRealization | None, z: complex) -> np.ndarray:
    """Truncated Green functions of every forward subtree, leaves to root."""
    if not g.is_tree:
        raise DomainError("the recursion is exact only on trees")
    z = complex(z)
    a = _diag(g, real) - z
    acc = np.zeros(g.n_vertices, dtype=complex)
    gam = np.empty(g.n_vertices, dtype=complex)
    for lev in reversed(g.levels()):
        gam[lev] = 1.0 / (a[lev] - acc[lev])
        par = g.parent[lev]
        keep = par >= 0
        np.add.at(acc, par[keep], gam[lev][keep])
    return gam


def root_row(g: FiniteGraph, gammas: np.ndarray) -> np.ndarray:
    """``G(0, x)`` for every ``x``: the product of gammas along the path."""
    G = np.empty_like(gammas)
    levels = g.levels()
    G[levels[0]] = gammas[levels[0]]
    for lev in levels[1:]:
        G[lev] = G[g.parent[lev]] * gammas[lev]
    return G


def exact_resolvent_root(g: FiniteGraph, real: DisorderRealization | None, z: complex) -> dict:
    if not complex(z).imag > 0:
        raise DomainError("exact resolvents are evaluated at Im z > 0")
    gam = tree_gammas(g, real, z)
    leaves = np.flatnonzero(g.distances == g.distances.max())
    return {"G_00": complex(gam[0]), "gammas": gam, "boundary_gammas": gam[leaves]}


def dense_root_resolvent(g: FiniteGraph, real: DisorderRealization | None, z: complex) -> np.ndarray:
    """Column ``(H - z)^{-1} delta_0`` by a direct sparse solve."""
    from scipy.sparse.linalg import spsolve

    H = assemble_hamiltonian(g, real).astype(complex)
    rhs = np.zeros(g.n_vertices, dtype=complex)
    rhs[0] = 1.0
    return spsolve((H - complex(z) * sparse.identity(g.n_vertices, format="csr")).tocsc(), rhs)


def check_im_propagation(g: FiniteGraph, real: DisorderRealization | None, z: complex, R: int) -> dict:
    """Both sides of ``Im Gamma(0) >= sum_{|x+|=R} |G(0,x)|^2 Im Gamma(x+)``.

    ``remainder`` is the exact difference ``eta * sum_{|y|<R} |G(0,y)|^2``.
    """
    if g.parent is None or R < 1 or R > g.distances.max():
        raise DomainError("need a rooted tree with 1 <= R <= depth")
    gam = tree_gammas(g, real, z)
    G = root_row(g, gam)
    plus = g.sphere(R)
    rhs = float(np.sum(np.abs(G[g.parent[plus]]) ** 2 * gam[plus].imag))
    inner = g.distances < R
    rem = float(complex(z).imag * np.sum(np.abs(G[inner]) ** 2))
    return {"lhs": float(gam[0].imag), "rhs": rhs, "remainder": rem}


def resonance_count(
    g: FiniteGraph, real: DisorderRealization | None, E: float, eta: float, delta: float, R: int
) -> dict:
    """Sites ``|x| = R`` with ``|G(0,x; E + i eta)| >= exp(delta * R)``."""
    if R > g.distances.max():
        raise DomainError("R exceeds the tree depth")
    G = root_row(g, tree_gammas(g, real, complex(E, eta)))
    thr = math.exp(delta * R)
    return {"N_R": int(np.count_nonzero(np.abs(G[g.sphere(R)]) >= thr)), "threshold": thr}


@dataclass
class ResonanceTable:
    R_values: list
    deltas: list
    p_hit: np.ndarray  # (n_delta, n_R)
    p_hit_se: np.ndarray
    mean_count: np.ndarray
    mean_count_se: np.ndarray
    n_realizations: int

    def trend(self, i_delta: int = 0) -> tuple[float, float]:
        """Weighted least-squares slope of P(N_R >= 1) in R and its error."""
        R = np.asarray(self.R_values, dtype=float)
        p = self.p_hit[i_delta]
        n = self.n_realizations
        # binomial variance with a floor so empty or full cells keep weight
        var = np.maximum(p * (1 - p), 1.0 / n) / n
        W = 1.0 / var
        X = np.stack([np.ones_like(R), R], axis=1)
        cov = np.linalg.inv(X.T @ (W[:, None] * X))
        beta = cov @ X.T @ (W * p)
        return float(beta[1]), float(math.sqrt(cov[1, 1]))


def resonance_experiment(
    K: int,
    lam: float,
    disorder: DisorderSpec,
    E: float,
    R_values,
    deltas,
    n_realizations: int,
    rng: RngHandle,
    eta: float = 1e-6,
    depth: int | None = None,
    flavor: str = "rooted",
) -> ResonanceTable:
    """Estimate ``P(N_R >= 1)`` and ``E[N_R]`` over independent trees.

    Realization ``i`` uses stream ``rng / i``.  All ``R`` and ``delta``
    values are read off the same tree of depth ``depth`` (default
    ``max(R) + 4``).
    """
    R_values = [int(r) for r in R_values]
    deltas = [float(d) for d in deltas]
    depth = max(R_values) + 4 if depth is None else depth
    g = build_truncated_tree(K, depth, flavor)
    spheres = [g.sphere(R) for R in R_values]
    counts = np.zeros((len(deltas), len(R_values), n_realizations))
    for i in range(n_realizations):
        real = realize(g, disorder, lam, derive(rng, [i]))
        absG = np.abs(root_row(g, tree_gammas(g, real, complex(E, eta))))
        for a, d in enumerate(deltas):
            for b, R in enumerate(R_values):
                counts[a, b, i] = np.count_nonzero(absG[spheres[b]] >= math.exp(d * R))
    hit = (counts >= 1).mean(axis=2)
    n = n_realizations
    return ResonanceTable(
        R_values,
        deltas,
        hit,
        np.sqrt(hit * (1 - hit) / n),
        counts.mean(axis=2),
        counts.std(axis=2, ddof=1) / math.sqrt(n),
        n,
    )


# --------------------------------------------------------------------------
# spectra and dynamics


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None = None

    def window(self, lo: float, hi: float) -> np.ndarray:
        return np.flatnonzero((self.eigenvalues >= lo) & (self.eigenvalues <= hi))

    def to_csv(self, path) -> None:
        np.savetxt(path, self.eigenvalues, fmt="%.17g", header="eigenvalue", comments="")


def diagonalize(H, vectors: bool = True, cap: int = DENSE_CAP) -> SpectralDecomposition:
    """Full symmetric eigendecomposition of a dense-able operator."""
    n = H.shape[0]
    if n > cap:
        raise SizeError(f"{n} vertices exceed the dense eigensolver cap {cap}; use statistics-only tools")
    A = H.toarray() if sparse.issparse(H) else np.asarray(H, dtype=float)
    if not vectors:
        return SpectralDecomposition(np.linalg.eigvalsh(A))
    w, V = np.linalg.eigh(A)
    resid = np.abs(H @ V - V * w).max() if n else 0.0
    scale = max(np.abs(A).sum(axis=1).max() if n else 0.0, 1.0)
    if resid > 1e-8 * scale:
        raise RuntimeError(f"eigensolver residual {resid:.2e} exceeds tolerance")
    return SpectralDecomposition(w, V)


def _window_weights(dec: SpectralDecomposition, window, root: int):
    if dec.eigenvectors is None:
        raise DomainError("eigenvectors are required")
    lo, hi = window if window is not None else (-np.inf, np.inf)
    idx = dec.window(lo, hi)
    if idx.size == 0:
        raise DomainError(f"no eigenvalues in the window {window}")
    V = dec.eigenvectors[:, idx]
    return dec.eigenvalues[idx], V, V[root, :].copy()


def amplitudes(dec: SpectralDecomposition, times, window=None, root: int = 0) -> np.ndarray:
    """``<delta_x, exp(-itH) P_I delta_root>`` as an array (time, vertex)."""
    E, V, c = _window_weights(dec, window, root)
    phases = np.exp(-1j * np.outer(np.asarray(times, float), E))
    return (phases * c) @ V.T


def evolve_second_moment(
    g: FiniteGraph, real: DisorderRealization | None, energy_window, times, dec: SpectralDecomposition | None = None
) -> np.ndarray:
    """``sum_x |x|^2 |<delta_x, exp(-itH) P_I delta_0>|^2`` for each time."""
    if dec is None:
        dec = diagonalize(assemble_hamiltonian(g, real))
    amp = amplitudes(dec, times, energy_window)
    return (np.abs(amp) ** 2) @ (g.distances.astype(float) ** 2)


def dynamical_localization_profile(
    samples, energy_window, R_values, times=None
) -> np.ndarray:
    """Ensemble mean of ``sum_{|x|=R} sup_t |<delta_x, exp(-itH) P_I delta_0>|^2``.

    ``samples`` yields ``(graph, realization)`` pairs.  The supremum is the
    larger of the maximum over ``times`` (default 0, 0.5, ..., 200) and the
    infinite-time average ``sum_n |v_n(x)|^2 |v_n(0)|^2``.
    """
    times = np.arange(0.0, 200.0 + 0.25, 0.5) if times is None else np.asarray(times, float)
    R_values = [int(r) for r in R_values]
    total = np.zeros(len(R_values))
    count = 0
    for g, real in samples:
        dec = diagonalize(assemble_hamiltonian(g, real))
        _, V, c = _window_weights(dec, energy_window, 0)
        sup = (np.abs(amplitudes(dec, times, energy_window)) ** 2).max(axis=0)
        cesaro = (V**2) @ (c**2)
        sup = np.maximum(sup, cesaro)
        total += [sup[g.distances == R].sum() for R in R_values]
        count += 1
    if count == 0:
        raise DomainError("empty ensemble")
    return total / count


def fit_loglog_slope(x, y) -> float:
    """Slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def fit_log_linear(x, y) -> tuple[float, float]:
    """Slope of ``log y`` against ``x`` and the coefficient of determination."""
    x = np.asarray(x, float)
    ly = np.log(np.asarray(y, float))
    slope, icpt = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + icpt)
    ss = np.sum((ly - ly.mean()) ** 2)
    return float(slope), float(1.0 - np.sum(resid**2) / ss) if ss > 0 else 1.0
