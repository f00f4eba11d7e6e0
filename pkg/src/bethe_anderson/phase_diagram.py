"""(E, lambda) scans with Lyapunov and free-energy certificates.

A point is ``Delocalized_LyapunovCertified`` when ``L + 3 se < log K`` and
``Localized_PhiCertified`` when either the fractional-moment bound or the
Monte Carlo estimate of ``phi(1)`` sits below ``-log K`` by the same
margin.  Everything else is ``Undetermined``, apart from energies outside
the spectrum of a bounded potential.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from .cavity import (
    CavityEstimate,
    CavityParams,
    EtaProtocol,
    McBudget,
    boundary_estimates,
    estimate_lyapunov,
    estimate_phi_at_one,
)
from .disorder import DisorderSpec
from .errors import ConvergenceError, DomainError, InconsistencyError, InvariantViolation
from .exact_forms import check_K, lyapunov_exact_free, min_log_fractional_moment_bound, spectrum_edges
from .parallel import ordered_map
from .rng import RngHandle, derive, float_key

log = logging.getLogger(__name__)

DELOCALIZED = "Delocalized_LyapunovCertified"
LOCALIZED = "Localized_PhiCertified"
OUTSIDE = "OutsideSpectrum"
UNDETERMINED = "Undetermined"
LABELS = (DELOCALIZED, LOCALIZED, OUTSIDE, UNDETERMINED)

GRID_COLUMNS = (
    "K", "lambda", "E", "L_value", "L_se", "phi1_value", "phi1_se", "dos_value", "dos_se", "label", "margin_sigma",
)


@dataclass
class PhaseConfig:
    K: int = 2
    disorder: DisorderSpec = field(default_factory=DisorderSpec.cauchy)
    protocol: EtaProtocol = field(default_factory=EtaProtocol)
    mc: McBudget = field(default_factory=McBudget)
    sigma: float = 3.0
    phi_mode: str = "auto"  # "auto": only when needed, "always", "never"
    analytic_bound: bool = True

    def __post_init__(self):
        self.K = check_K(self.K)
        if self.phi_mode not in ("auto", "always", "never"):
            raise DomainError(f"unknown phi_mode {self.phi_mode!r}")

    def key_dict(self) -> dict:
        return {
            "K": self.K,
            "disorder": self.disorder.to_config(),
            "protocol": {"etas": list(self.protocol.etas), "rule": self.protocol.rule,
                         "warm_start": self.protocol.warm_start},
            "mc": self.mc.to_dict(),
            "sigma": self.sigma,
            "phi_mode": self.phi_mode,
            "analytic_bound": self.analytic_bound,
        }


@dataclass
class PhasePoint:
    E: float
    lam: float
    K: int
    label: str
    margin: float
    lyapunov: CavityEstimate | None = None
    dos: CavityEstimate | None = None
    phi_at_one: CavityEstimate | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in LABELS:
            raise DomainError(f"unknown label {self.label!r}")

    def row(self) -> dict:
        def vs(est):
            return (est.value, est.std_error) if est is not None else (math.nan, math.nan)

        L, Lse = vs(self.lyapunov)
        p, pse = vs(self.phi_at_one)
        d, dse = vs(self.dos)
        return dict(zip(GRID_COLUMNS, (self.K, self.lam, self.E, L, Lse, p, pse, d, dse, self.label, self.margin)))

    def to_json(self) -> dict:
        def est(e):
            if e is None:
                return None
            return {"value": e.value, "std_error": e.std_error, "n_effective": e.n_effective,
                    "eta": e.eta, "metadata": e.metadata}

        return {"E": self.E, "lam": self.lam, "K": self.K, "label": self.label, "margin": self.margin,
                "lyapunov": est(self.lyapunov), "dos": est(self.dos), "phi_at_one": est(self.phi_at_one),
                "diagnostics": self.diagnostics}

    @classmethod
    def from_json(cls, d: dict) -> "PhasePoint":
        def est(e):
            return None if e is None else CavityEstimate(**e)

        return cls(d["E"], d["lam"], d["K"], d["label"], d["margin"], est(d["lyapunov"]), est(d["dos"]),
                   est(d["phi_at_one"]), d.get("diagnostics", {}))


def point_stream(master: RngHandle, lam: float, E: float) -> RngHandle:
    return derive(master, [float_key(lam), float_key(E)])


def _sigma_margin(gap: float, se: float) -> float:
    if se > 0:
        return gap / se
    return math.copysign(math.inf, gap) if gap != 0 else 0.0


def classify_point(E: float, lam: float, cfg: PhaseConfig) -> PhasePoint:
    """Run the cavity estimators at ``(E, lam)`` and attach the strongest label.

    ``margin`` is the signed distance to the relevant threshold in standard
    errors, positive in the certified direction.
    """
    E, lam = float(E), float(lam)
    logK = math.log(cfg.K)
    edges = spectrum_edges(cfg.K, lam, cfg.disorder)
    if lam > 0 and cfg.disorder.bounded and not edges[0] <= E <= edges[1]:
        gap = min(abs(E - edges[0]), abs(E - edges[1]))
        return PhasePoint(E, lam, cfg.K, OUTSIDE, math.inf, diagnostics={"distance_to_spectrum": gap})

    mc = cfg.mc.with_rng(point_stream(cfg.mc.rng, lam, E))
    params = CavityParams(cfg.K, lam, complex(E, cfg.protocol.etas[0]), cfg.disorder)
    diag: dict = {}
    try:
        ests, stages = boundary_estimates(params, cfg.protocol, mc, ("lyapunov", "dos"))
    except (ConvergenceError, InvariantViolation) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        diag.update(getattr(exc, "diagnostics", {}) or {})
        return PhasePoint(E, lam, cfg.K, UNDETERMINED, math.nan, diagnostics=diag)
    lyap, dos = ests["lyapunov"], ests["dos"]
    m_L = _sigma_margin(logK - lyap.value, lyap.std_error)
    deloc = m_L > cfg.sigma

    bound = None
    if cfg.analytic_bound and lam > 0:
        b, s_opt = min_log_fractional_moment_bound(lam, cfg.disorder.sup_density)
        bound = b
        diag["fm_bound"] = {"log_bound": b, "s": s_opt}
    analytic_loc = bound is not None and bound < -logK

    phi = None
    want_phi = cfg.phi_mode == "always" or (cfg.phi_mode == "auto" and not deloc and not analytic_loc)
    if want_phi and lam > 0:
        try:
            phi = estimate_phi_at_one(params, mc, cfg.protocol, stages=stages)
        except InconsistencyError as exc:
            diag["phi_error"] = str(exc)
    m_phi = _sigma_margin(-logK - phi.value, phi.std_error) if phi is not None else -math.inf
    mc_loc = m_phi > cfg.sigma

    # convexity with phi(0) = 0 and phi'(0) = -L forces phi(1) >= -L
    if phi is not None:
        excess = _sigma_margin(-lyap.value - phi.value, math.hypot(phi.std_error, lyap.std_error))
        if excess > cfg.sigma:
            diag["inconsistent"] = f"phi(1) below -L by {excess:.1f} sigma"
            return PhasePoint(E, lam, cfg.K, UNDETERMINED, m_L, lyap, dos, phi, diag)

    if deloc and (analytic_loc or mc_loc):
        diag["inconsistent"] = "both certificates hold"
        return PhasePoint(E, lam, cfg.K, UNDETERMINED, m_L, lyap, dos, phi, diag)
    if deloc:
        return PhasePoint(E, lam, cfg.K, DELOCALIZED, m_L, lyap, dos, phi, diag)
    if analytic_loc:
        diag["certificate"] = "fractional-moment bound"
        return PhasePoint(E, lam, cfg.K, LOCALIZED, math.inf, lyap, dos, phi, diag)
    if mc_loc:
        diag["certificate"] = "monte carlo phi(1)"
        return PhasePoint(E, lam, cfg.K, LOCALIZED, m_phi, lyap, dos, phi, diag)
    return PhasePoint(E, lam, cfg.K, UNDETERMINED, max(m_L, m_phi), lyap, dos, phi, diag)


# --------------------------------------------------------------------------
# scans


def cache_key(cfg: PhaseConfig, lam: float, E: float) -> str:
    blob = json.dumps({"cfg": cfg.key_dict(), "lam": float_key(lam), "E": float_key(E)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _scan_task(args):
    lam, E, cfg, cache_dir = args
    path = Path(cache_dir) / f"{cache_key(cfg, lam, E)}.json" if cache_dir else None
    if path is not None and path.exists():
        return PhasePoint.from_json(json.loads(path.read_text(encoding="utf-8")))
    point = classify_point(E, lam, cfg)
    if path is not None:
        _atomic_write(path, json.dumps(point.to_json(), sort_keys=True))
    return point


def scan(lambdas, energies, cfg: PhaseConfig, cache_dir=None, workers: int | None = None) -> list[PhasePoint]:
    """Classify every grid point, lambda-major.

    Each point draws from the stream ``mc.rng / float_key(lam) / float_key(E)``
    and finished points are cached by a hash of their full configuration,
    so interrupted scans resume and results do not depend on ``workers``.
    """
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(float(l), float(e), cfg, None if cache_dir is None else str(cache_dir))
             for l in lambdas for e in energies]
    return ordered_map(_scan_task, tasks, workers)


@dataclass(frozen=True)
class EdgePoint:
    lam: float
    E: float
    criterion: str  # "lyapunov" or "phi"
    along: str  # axis along which the crossing was interpolated


def crossings(x, y) -> list[float]:
    """Linear-interpolated zeros of ``y(x)`` between adjacent samples."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    out = []
    for i in range(len(x) - 1):
        a, b = y[i], y[i + 1]
        if not (np.isfinite(a) and np.isfinite(b)):
            continue
        if a == 0:
            out.append(float(x[i]))
        elif a * b < 0:
            out.append(float(x[i] - a * (x[i + 1] - x[i]) / (b - a)))
    if len(y) and y[-1] == 0 and np.isfinite(y[-1]):
        out.append(float(x[-1]))
    return out


def _gap(p: PhasePoint, criterion: str) -> float:
    logK = math.log(p.K)
    if criterion == "lyapunov":
        return logK - p.lyapunov.value if p.lyapunov is not None else math.nan
    return -logK - p.phi_at_one.value if p.phi_at_one is not None else math.nan


def edge_extract(grid: list[PhasePoint]) -> list[EdgePoint]:
    """Zero crossings of ``log K - L`` and of ``-log K - phi(1)``.

    Crossings are interpolated along ``lambda`` in every energy column and
    along ``E`` in every disorder row.
    """
    out = []
    for crit in ("lyapunov", "phi"):
        for along, fixed in (("lambda", "E"), ("E", "lam")):
            keys = sorted({getattr(p, fixed) for p in grid})
            for k in keys:
                line = sorted((p for p in grid if getattr(p, fixed) == k), key=lambda p: getattr(p, "lam" if along == "lambda" else "E"))
                xs = [p.lam if along == "lambda" else p.E for p in line]
                for x in crossings(xs, [_gap(p, crit) for p in line]):
                    lam, E = (x, k) if along == "lambda" else (k, x)
                    out.append(EdgePoint(lam, E, crit, along))
    return out


def continuity_check(
    interval, lambdas, cfg: PhaseConfig, n_nodes: int = 9, exact=None
) -> list[dict]:
    """``|int_I L_lam dE - int_I L_0 dE|`` for each ``lam``.

    ``L_lam`` is estimated at ``n_nodes`` equispaced energies (Simpson
    rule); ``int_I L_0`` uses the closed form.  ``exact(lam, E)``, when
    given, adds the closed-form integral for comparison.
    """
    a, b = map(float, interval)
    if not b > a:
        raise DomainError("interval must have positive length")
    edge = cfg.K + 1
    if a < -edge or b > edge:
        raise DomainError("interval must lie in [-(K+1), K+1]")
    if n_nodes < 3 or n_nodes % 2 == 0:
        raise DomainError("n_nodes must be odd and >= 3")
    nodes = np.linspace(a, b, n_nodes)
    ref = float(integrate.quad(lambda e: float(lyapunov_exact_free(cfg.K, e + 0j)), a, b, limit=200)[0])
    w = np.full(n_nodes, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    w *= (b - a) / (n_nodes - 1) / 3.0
    rows = []
    for lam in lambdas:
        lam = float(lam)
        vals, errs = [], []
        for e in nodes:
            mc = cfg.mc.with_rng(point_stream(cfg.mc.rng, lam, e))
            est = estimate_lyapunov(CavityParams(cfg.K, lam, complex(e, cfg.protocol.etas[0]), cfg.disorder), cfg.protocol, mc)
            vals.append(est.value)
            errs.append(est.std_error)
        integral = float(w @ np.array(vals))
        se = float(np.sqrt(np.sum(w**2 * np.array(errs) ** 2)))
        row = {"lambda": lam, "integral": integral, "se": se, "reference": ref, "difference": abs(integral - ref)}
        if exact is not None:
            ex = float(integrate.quad(lambda e: float(exact(lam, e)), a, b, limit=200)[0])
            row["exact_integral"] = ex
            row["exact_difference"] = abs(ex - ref)
        rows.append(row)
    return rows
