"""Population dynamics for the self-consistency equations.

A pool of ``N`` complex numbers represents the law of the truncated Green
function ``Gamma(x; z)`` of the rooted tree.  One sweep performs ``N``
random-slot replacements ``Gamma <- 1 / (lam*omega - z - sum of K pool
draws)``.  Boundary values on the real axis are obtained by running the
pool at a decreasing sequence of ``eta = Im z`` and extrapolating.

Path observables (fractional moments and second moments of the two-point
function) are computed from the equilibrated pool by growing a ray toward
the root: each ray vertex gets one on-ray child and ``K - 1`` children
drawn from the pool.  The mean of the product of ``|Gamma|**s`` along the
ray is evaluated by sequential importance resampling, which keeps the
estimator stable when a few rays carry most of the weight.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, stats

from . import _kernels
from .disorder import DisorderSpec
from .errors import (
    AccuracyWarning,
    ConvergenceError,
    DomainError,
    HeavyTailWarning,
    InconsistencyError,
    InvariantViolation,
)
from .exact_forms import check_K, spectrum_edges
from .rng import RngHandle, derive, float_key

log = logging.getLogger(__name__)

# median of normal data has standard error sqrt(pi/2) * sigma / sqrt(n)
_MEDIAN_SE = math.sqrt(math.pi / 2.0)


@dataclass(frozen=True)
class CavityParams:
    K: int
    lam: float
    z: complex
    disorder: DisorderSpec

    def __post_init__(self):
        object.__setattr__(self, "K", check_K(self.K))
        object.__setattr__(self, "z", complex(self.z))
        if self.lam < 0:
            raise DomainError("disorder strength lam must be >= 0")
        if self.z.imag < 0:
            raise DomainError("Im z must be >= 0")

    @property
    def E(self) -> float:
        return self.z.real

    @property
    def eta(self) -> float:
        return self.z.imag

    def at_eta(self, eta: float) -> "CavityParams":
        return replace(self, z=complex(self.E, eta))

    def at_energy(self, E: float) -> "CavityParams":
        return replace(self, z=complex(E, self.eta))


@dataclass(frozen=True)
class EtaProtocol:
    """How boundary values ``eta -> 0`` are reached.

    ``rule="sqrt"`` fits ``c + a*sqrt(eta) + b*eta`` through the last three
    points (exact for square-root band-edge behavior); ``rule="linear"``
    uses a straight line through the last two.  The discrepancy between the
    two is reported as an extrapolation uncertainty.
    """

    etas: tuple[float, ...] = (0.1, 0.01, 0.001)
    rule: str = "sqrt"
    warm_start: bool = True

    def __post_init__(self):
        etas = tuple(float(e) for e in self.etas)
        if not etas or any(e <= 0 for e in etas):
            raise DomainError("eta protocol needs positive values")
        if any(b >= a for a, b in zip(etas, etas[1:])):
            raise DomainError("eta protocol must be strictly decreasing")
        if self.rule not in ("sqrt", "linear"):
            raise DomainError(f"unknown extrapolation rule {self.rule!r}")
        object.__setattr__(self, "etas", etas)


@dataclass(frozen=True)
class McBudget:
    n_pool: int = 100_000
    burn_in: int = 200
    n_measure: int = 100
    n_batches: int = 10
    n_paths: int = 65_536
    path_groups: int = 16
    path_length: int = 40
    drift_warn_sigma: float = 2.0
    drift_fail_sigma: float = 5.0
    drift_abs_tol: float = 1e-4
    rng: RngHandle = field(default_factory=lambda: RngHandle(0))

    def __post_init__(self):
        if self.n_measure < self.n_batches or self.n_batches < 4 or self.n_batches % 2:
            raise DomainError("need an even number >= 4 of batches and n_measure >= n_batches")
        if self.n_paths < self.path_groups * 16:
            raise DomainError("too few paths per group")

    def with_rng(self, rng: RngHandle) -> "McBudget":
        return replace(self, rng=rng)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "rng"}
        d["rng"] = self.rng.to_dict()
        return d


@dataclass(frozen=True)
class CavityEstimate:
    value: float
    std_error: float
    n_effective: int
    eta: float
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.std_error >= 0:
            raise ValueError("std_error must be >= 0")


@dataclass(eq=False)
class CavityPool:
    samples: np.ndarray
    params: CavityParams
    sweep_count: int
    rng: RngHandle
    generator: np.random.Generator = field(repr=False)

    @property
    def size(self) -> int:
        return self.samples.size


# --------------------------------------------------------------------------
# pool dynamics


def init_pool(params: CavityParams, n_pool: int, rng: RngHandle) -> CavityPool:
    """Pool of single-site resolvents ``1 / (lam*omega - z)``."""
    if n_pool < 1000:
        raise DomainError("pool size must be >= 1000")
    if not params.eta > 0:
        raise DomainError("population dynamics needs Im z > 0; use an eta protocol for boundary values")
    gen = rng.generator()
    lam_omega = params.lam * params.disorder.sample(gen, n_pool) if params.lam else np.zeros(n_pool)
    samples = 1.0 / (lam_omega - params.z)
    return CavityPool(samples.astype(np.complex128), params, 0, rng, gen)


def _lam_omega(params: CavityParams, gen, n: int) -> np.ndarray:
    if params.lam == 0:
        return np.zeros(n)
    return params.lam * params.disorder.sample(gen, n)


def sweep(pool: CavityPool, n_sweeps: int = 1) -> CavityPool:
    """``n_sweeps * N`` asynchronous replacements, in place."""
    p = pool.params
    n = pool.size
    gen = pool.generator
    bound = (1.0 / p.eta) * (1.0 + 1e-9) if p.eta > 0 else np.inf
    for _ in range(n_sweeps):
        assert p.eta > 0, "sweeps require Im z > 0"
        picks = gen.integers(0, n, size=(n, p.K))
        slots = gen.integers(0, n, size=n)
        lam_omega = _lam_omega(p, gen, n)
        min_im, max_abs = _kernels.sweep_kernel(pool.samples, lam_omega, picks, slots, p.z)
        pool.sweep_count += 1
        if not (min_im > 0 and max_abs <= bound):
            raise InvariantViolation(
                f"pool left the upper half-plane or the resolvent bound after sweep "
                f"{pool.sweep_count}: min Im = {min_im:.3e}, max |G| = {max_abs:.3e}, 1/eta = {1 / p.eta:.3e}"
            )
    return pool


def root_greens(pool: CavityPool, n: int) -> np.ndarray:
    """``n`` samples of the full-lattice diagonal Green function G(0,0; z)."""
    p = pool.params
    gen = pool.generator
    picks = gen.integers(0, pool.size, size=(n, p.K + 1))
    return _kernels.attach_kernel(np.zeros(n, np.complex128), pool.samples, _lam_omega(p, gen, n), picks, p.z)


def _observe(pool: CavityPool, name: str) -> float:
    if name == "lyapunov":
        return float(-np.mean(np.log(np.abs(pool.samples))))
    if name == "dos":
        return float(np.mean(root_greens(pool, pool.size).imag) / math.pi)
    raise ValueError(f"unknown observable {name!r}")


@dataclass
class ChainSummary:
    mean: float
    std_error: float
    drift: float
    drift_sigma: float
    stationary: bool


def _batch_summary(series: np.ndarray, mc: McBudget) -> ChainSummary:
    b = np.array_split(series, mc.n_batches)
    means = np.array([x.mean() for x in b])
    mean = float(means.mean())
    se = float(means.std(ddof=1) / math.sqrt(mc.n_batches))
    h = mc.n_batches // 2
    first, second = means[:h], means[h:]
    drift = float(second.mean() - first.mean())
    # pooled within-half variance; the t statistic is reported as the
    # Gaussian z with the same tail probability
    dof = mc.n_batches - 2
    pooled = (np.sum((first - first.mean()) ** 2) + np.sum((second - second.mean()) ** 2)) / dof
    se_d = math.sqrt(pooled * (1.0 / first.size + 1.0 / second.size))
    if abs(drift) <= mc.drift_abs_tol:
        z = 0.0
    elif se_d > 0:
        z = float(stats.norm.isf(stats.t.sf(abs(drift) / se_d, dof)))
    else:
        z = math.inf
    return ChainSummary(mean, se, drift, z, z <= mc.drift_warn_sigma)


def run_chain(pool: CavityPool, mc: McBudget, observables=("lyapunov",)):
    """Burn in, then record each observable after every measurement sweep."""
    sweep(pool, mc.burn_in)
    series = {name: np.empty(mc.n_measure) for name in observables}
    for m in range(mc.n_measure):
        sweep(pool, 1)
        for name in observables:
            series[name][m] = _observe(pool, name)
    return series


def equilibrated_pools(params: CavityParams, protocol: EtaProtocol, mc: McBudget, observables=("lyapunov",)):
    """Run one chain per eta of the protocol.

    Returns a list of ``(eta, pool, {observable: ChainSummary})``.  Stage
    ``i`` uses stream ``mc.rng / i``; with ``warm_start`` the pool of stage
    ``i`` starts from the final pool of stage ``i - 1``.
    """
    stages = []
    prev = None
    for i, eta in enumerate(protocol.etas):
        p = params.at_eta(eta)
        handle = derive(mc.rng, [i])
        pool = init_pool(p, mc.n_pool, handle)
        if protocol.warm_start and prev is not None:
            pool.samples[:] = prev.samples
        series = run_chain(pool, mc, observables)
        summary = {name: _batch_summary(s, mc) for name, s in series.items()}
        for name, s in summary.items():
            if s.drift_sigma > mc.drift_fail_sigma:
                raise ConvergenceError(
                    f"{name} drifts by {s.drift:.3e} ({s.drift_sigma:.1f} sigma) at eta={eta}",
                    diagnostics={"observable": name, "eta": eta, "drift": s.drift, "drift_sigma": s.drift_sigma},
                )
            if not s.stationary:
                log.info("%s not stationary at eta=%g: drift %.3e (%.1f sigma)", name, eta, s.drift, s.drift_sigma)
        stages.append((eta, pool, summary))
        prev = pool
    return stages


# --------------------------------------------------------------------------
# eta extrapolation


def _linear_weights(etas):
    e1, e2 = etas[-2], etas[-1]
    w = np.zeros(len(etas))
    w[-1] = e1 / (e1 - e2)
    w[-2] = -e2 / (e1 - e2)
    return w


def _sqrt_weights(etas):
    e = np.asarray(etas[-3:], dtype=float)
    A = np.stack([np.ones(3), np.sqrt(e), e])
    w3 = np.linalg.solve(A, np.array([1.0, 0.0, 0.0]))
    w = np.zeros(len(etas))
    w[-3:] = w3
    return w


def extrapolate_eta(etas, values, errors, rule: str = "sqrt"):
    """Extrapolate values at ``etas`` to ``eta = 0``.

    Returns ``(value, stat_error, model_error)`` where ``model_error`` is
    the spread between the square-root and linear rules.
    """
    etas = list(etas)
    v = np.asarray(values, dtype=float)
    e = np.asarray(errors, dtype=float)
    if len(etas) == 1:
        return float(v[0]), float(e[0]), 0.0
    lin = _linear_weights(etas)
    if len(etas) == 2:
        return float(lin @ v), float(np.sqrt(np.sum(lin**2 * e**2))), 0.0
    sq = _sqrt_weights(etas)
    w, alt = (sq, lin) if rule == "sqrt" else (lin, sq)
    val = float(w @ v)
    return val, float(np.sqrt(np.sum(w**2 * e**2))), abs(val - float(alt @ v))


def boundary_estimates(
    params: CavityParams,
    protocol: EtaProtocol | None = None,
    mc: McBudget | None = None,
    observables=("lyapunov",),
):
    """Eta-extrapolated estimates of several pool observables at once.

    Returns ``({name: CavityEstimate}, stages)``.
    """
    protocol = protocol or EtaProtocol()
    mc = mc or McBudget()
    stages = equilibrated_pools(params, protocol, mc, observables)
    etas = [s[0] for s in stages]
    out = {}
    for name in observables:
        vals = [s[2][name].mean for s in stages]
        errs = [s[2][name].std_error for s in stages]
        val, stat, model = extrapolate_eta(etas, vals, errs, protocol.rule)
        out[name] = CavityEstimate(
            value=val,
            std_error=math.hypot(stat, model),
            n_effective=mc.n_pool * mc.n_batches,
            eta=0.0 if len(etas) > 1 else etas[0],
            metadata={
                "observable": name,
                "K": params.K,
                "lambda": params.lam,
                "E": params.E,
                "etas": etas,
                "values": vals,
                "errors": errs,
                "rule": protocol.rule,
                "stat_error": stat,
                "extrapolation_error": model,
                "drift_sigma": [s[2][name].drift_sigma for s in stages],
                "stationary": all(s[2][name].stationary for s in stages),
                "n_pool": mc.n_pool,
                "sweeps": mc.burn_in + mc.n_measure,
                "rng": mc.rng.to_dict(),
            },
        )
    return out, stages


def estimate_lyapunov(params, protocol=None, mc=None) -> CavityEstimate:
    """Boundary value of ``L(z) = -E log|Gamma(0; z)|``."""
    return boundary_estimates(params, protocol, mc, ("lyapunov",))[0]["lyapunov"]


def estimate_dos(params, protocol=None, mc=None) -> CavityEstimate:
    """Boundary value of ``E[Im G(0,0; z)] / pi``."""
    return boundary_estimates(params, protocol, mc, ("dos",))[0]["dos"]


def estimate_ids(params, E: float, mc=None, protocol=None, e_min=None, dE: float = 0.05) -> CavityEstimate:
    """Integrated density of states by trapezoidal quadrature of the DOS.

    The lower limit defaults to the bottom of the spectrum for bounded
    disorder; for unbounded disorder it is ``-2 sqrt K + lam * q`` with
    ``q`` the 10^-4 quantile of the potential, and the mass below it is
    approximated by the single-site tail ``P(lam * omega < e_min)``.
    """
    mc = mc or McBudget()
    edges = spectrum_edges(params.K, params.lam, params.disorder)
    tail = 0.0
    if e_min is None:
        if edges == "all reals":
            e_min = -2.0 * math.sqrt(params.K) + params.lam * float(params.disorder.ppf(1e-4))
        else:
            e_min = edges[0]
    if edges == "all reals" and params.lam > 0:
        tail = float(params.disorder.cdf(e_min / params.lam))
    if E <= e_min:
        return CavityEstimate(tail, 0.0, 0, 0.0, {"grid": []})
    n = max(2, int(math.ceil((E - e_min) / dE)))
    n += n % 2  # even number of intervals for the coarse-grid comparison
    grid = np.linspace(e_min, E, n + 1)
    vals, errs = [], []
    for e in grid:
        est = estimate_dos(params.at_energy(e), protocol, mc.with_rng(derive(mc.rng, [float_key(e)])))
        vals.append(est.value)
        errs.append(est.std_error)
    vals, errs = np.array(vals), np.array(errs)
    h = grid[1] - grid[0]
    w = np.full(grid.size, h)
    w[0] = w[-1] = h / 2
    fine = float(w @ vals)
    coarse = float(integrate.trapezoid(vals[::2], grid[::2]))
    if fine > 0 and abs(fine - coarse) / fine > 0.1:
        warnings.warn(f"IDS quadrature unresolved (fine {fine:.4g} vs coarse {coarse:.4g})", AccuracyWarning)
    return CavityEstimate(
        fine + tail,
        float(np.sqrt(np.sum(w**2 * errs**2))),
        mc.n_pool * mc.n_batches,
        0.0,
        {"grid": grid.tolist(), "dos": vals.tolist(), "tail": tail, "coarse": coarse + tail},
    )


# --------------------------------------------------------------------------
# ray observables


def _weights(logw: np.ndarray):
    """Normalized weights and log of their row means, computed in log space."""
    m = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - m)
    mean = w.mean(axis=1)
    return w, np.log(mean) + m[:, 0]


def _resample(w: np.ndarray, gen) -> np.ndarray:
    """Systematic resampling, row by row; returns flat indices."""
    G, m = w.shape
    cw = np.cumsum(w, axis=1)
    cw /= cw[:, -1:]
    idx = np.empty((G, m), dtype=np.int64)
    base = np.arange(m)
    for g in range(G):
        u = (gen.random() + base) / m
        idx[g] = np.minimum(np.searchsorted(cw[g], u), m - 1) + g * m
    return idx.ravel()


@dataclass
class RaySample:
    """Per-group logs of the ray weights.

    ``log_c[g, k]`` is the log mean weight at ray step ``k + 1`` and
    ``log_root[g, k]`` the log mean of ``|G(0,0)|**s`` when the ray is closed
    off after ``k + 1`` steps, so ``log E|G(0,x)|**s`` at ``|x| = d`` is
    ``log_c[g, :d].sum() + log_root[g, d - 1]``.
    """

    s: float
    log_c: np.ndarray
    log_root: np.ndarray
    max_top_share: float

    def log_moment(self, d: int) -> np.ndarray:
        return self.log_c[:, :d].sum(axis=1) + self.log_root[:, d - 1]


def sample_ray(pool: CavityPool, s: float, R: int, mc: McBudget, gen=None) -> RaySample:
    """Grow ``mc.n_paths`` rays of length ``R`` in ``mc.path_groups`` groups."""
    p = pool.params
    gen = gen or pool.generator
    G = mc.path_groups
    m = mc.n_paths // G
    n = G * m
    part = pool.samples[gen.integers(0, pool.size, size=n)]
    log_c = np.empty((G, R))
    log_root = np.empty((G, R))
    top = max(1, m // 100)
    max_share = 0.0
    for k in range(R):
        logw = (s * np.log(np.abs(part))).reshape(G, m)
        w, log_c[:, k] = _weights(logw)
        share = np.partition(w, m - top, axis=1)[:, m - top :].sum(axis=1) / w.sum(axis=1)
        max_share = max(max_share, float(share.max()))
        part = part[_resample(w, gen)]
        # close the ray: the root sees the (resampled) ray particle and K pool draws
        root = _kernels.attach_kernel(
            part, pool.samples, _lam_omega(p, gen, n), gen.integers(0, pool.size, size=(n, p.K)), p.z
        )
        _, log_root[:, k] = _weights((s * np.log(np.abs(root))).reshape(G, m))
        part = _kernels.attach_kernel(
            part, pool.samples, _lam_omega(p, gen, n), gen.integers(0, pool.size, size=(n, p.K - 1)), p.z
        )
    if max_share > 0.5:
        warnings.warn(
            f"top 1% of rays carry {max_share:.0%} of the weight (s={s}); moment estimate may be unreliable",
            HeavyTailWarning,
        )
    return RaySample(s, log_c, log_root, max_share)


def _median_estimate(per_group: np.ndarray):
    G = per_group.size
    return float(np.median(per_group)), float(_MEDIAN_SE * per_group.std(ddof=1) / math.sqrt(G))


def _ready_pool(params: CavityParams, mc: McBudget, pool: CavityPool | None) -> CavityPool:
    if pool is not None:
        return pool
    pool = init_pool(params, mc.n_pool, mc.rng)
    return sweep(pool, mc.burn_in)


def free_energy_from_ray(ray: RaySample, skip: int | None = None):
    """Per-group growth rates: mean log weight after the first ``skip`` steps."""
    R = ray.log_c.shape[1]
    skip = max(1, R // 4) if skip is None else skip
    return ray.log_c[:, skip:].mean(axis=1)


def estimate_free_energy(params: CavityParams, s: float, R: int | None = None, mc=None, pool=None) -> CavityEstimate:
    """``phi(s; z) = lim log E|G(0,x;z)|^s / |x|`` at fixed ``z``.

    The rate is the mean log growth of the ray weights over the last three
    quarters of the ray, so the O(1) contributions of both ray ends drop
    out.  Groups of rays give independent estimates; their median is
    returned.
    """
    if not 0 < s < 1:
        raise DomainError("s must lie in (0, 1)")
    mc = mc or McBudget()
    R = mc.path_length if R is None else R
    if R < 10:
        raise DomainError("path length must be >= 10")
    pool = _ready_pool(params, mc, pool)
    ray = sample_ray(pool, s, R, mc)
    val, se = _median_estimate(free_energy_from_ray(ray))
    return CavityEstimate(
        val, se, mc.n_paths, params.eta,
        {"s": s, "R": R, "max_top_share": ray.max_top_share, "K": params.K, "lambda": params.lam, "E": params.E},
    )


def estimate_phi_at_one(
    params: CavityParams,
    mc=None,
    protocol=None,
    s_values=(0.7, 0.8, 0.9, 0.95),
    stages=None,
) -> CavityEstimate:
    """Boundary value ``phi(1; E)``: eta -> 0 first, then s -> 1.

    Each ``phi(s; E + i eta)`` is extrapolated to ``eta = 0`` with the
    protocol's rule; a straight line through the last three ``s`` values
    is then evaluated at ``s = 1``.  Both extrapolations are linear in the
    grid values, so taking them in the other order gives the same number.
    """
    mc = mc or McBudget()
    protocol = protocol or EtaProtocol()
    if stages is None:
        stages = equilibrated_pools(params, protocol, mc, ("lyapunov",))
    etas = [st[0] for st in stages]
    phis = np.empty((len(s_values), len(stages)))
    errs = np.empty_like(phis)
    for j, (eta, pool, _) in enumerate(stages):
        gen = derive(mc.rng, [1000 + j]).generator()
        for i, s in enumerate(s_values):
            ray = sample_ray(pool, s, mc.path_length, mc, gen)
            phis[i, j], errs[i, j] = _median_estimate(free_energy_from_ray(ray))
    phi_s = np.empty(len(s_values))
    se_s = np.empty(len(s_values))
    for i in range(len(s_values)):
        v, stat, model = extrapolate_eta(etas, phis[i], errs[i], protocol.rule)
        phi_s[i], se_s[i] = v, math.hypot(stat, model)

    for i in range(len(s_values) - 1):
        if phi_s[i + 1] - phi_s[i] > 3.0 * math.hypot(se_s[i], se_s[i + 1]):
            raise InconsistencyError(
                f"phi increases from s={s_values[i]} to s={s_values[i + 1]}: {phi_s[i]:.4f} -> {phi_s[i + 1]:.4f}"
            )

    s3 = np.asarray(s_values[-3:], dtype=float)
    A = np.stack([np.ones(3), s3], axis=1)
    w3 = np.array([1.0, 1.0]) @ np.linalg.pinv(A)  # evaluate the LS line at s = 1
    val = float(w3 @ phi_s[-3:])
    stat = float(np.sqrt(np.sum(w3**2 * se_s[-3:] ** 2)))
    s2 = np.asarray(s_values[-2:], dtype=float)
    two = float(phi_s[-1] + (1.0 - s2[1]) * (phi_s[-1] - phi_s[-2]) / (s2[1] - s2[0]))
    extrap = abs(val - two)
    return CavityEstimate(
        val,
        math.hypot(stat, extrap),
        mc.n_paths,
        0.0 if len(etas) > 1 else etas[0],
        {
            "s_values": list(s_values),
            "phi_s": phi_s.tolist(),
            "phi_s_se": se_s.tolist(),
            "phi_grid": phis.tolist(),
            "etas": etas,
            "stat_error": stat,
            "extrapolation_error": extrap,
            "extrapolation_dominated": extrap > stat,
            "K": params.K,
            "lambda": params.lam,
            "E": params.E,
        },
    )


def estimate_greens_second_moment(params: CavityParams, distances, mc=None, pool=None) -> list[CavityEstimate]:
    """``E|G(0,x; z)|^2`` for ``|x|`` in ``distances`` on the Bethe lattice."""
    if not params.eta > 0:
        raise DomainError("second moments are probed at Im z > 0")
    distances = [int(d) for d in distances]
    if min(distances) < 1:
        raise DomainError("distances must be >= 1")
    mc = mc or McBudget()
    pool = _ready_pool(params, mc, pool)
    ray = sample_ray(pool, 2.0, max(distances), mc)
    out = []
    for d in distances:
        lv, lse = _median_estimate(ray.log_moment(d))
        value = math.exp(lv)
        out.append(
            CavityEstimate(
                value, value * lse, mc.n_paths, params.eta,
                {"distance": d, "log_value": lv, "log_se": lse, "max_top_share": ray.max_top_share},
            )
        )
    return out
