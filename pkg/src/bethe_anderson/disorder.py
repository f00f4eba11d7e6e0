"""Single-site distributions of the random potential."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .errors import ConfigurationError
from .rng import RngHandle

KINDS = ("cauchy", "gaussian", "uniform", "tabulated")

_SUP_DENSITY = {
    "cauchy": 1.0 / math.pi,
    "gaussian": 1.0 / math.sqrt(2.0 * math.pi),
    "uniform": 0.5,
}

# Largest r with finite r-th absolute moment (Cauchy: every r < 1).
_MOMENT_ORDER = {"cauchy": 1.0, "gaussian": math.inf, "uniform": math.inf}


@dataclass(frozen=True, eq=False)
class DisorderSpec:
    """Law of the on-site potential.

    Built-ins are the standard Cauchy, the standard Gaussian and the
    uniform law on [-1, 1].  A tabulated density is interpolated linearly
    between its grid points and renormalized when constructed.

    Assumption (i) on the density (boundedness relative to its minimal
    function) has no computational role and is not checked.
    """

    kind: str
    grid_v: np.ndarray | None = field(default=None, repr=False)
    grid_rho: np.ndarray | None = field(default=None, repr=False)
    moment_order_r: float = math.inf
    _cdf: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ConfigurationError(f"unknown disorder kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind != "tabulated":
            object.__setattr__(self, "moment_order_r", _MOMENT_ORDER[kind])
            return
        v = np.asarray(self.grid_v, dtype=float)
        rho = np.asarray(self.grid_rho, dtype=float)
        if v.ndim != 1 or v.shape != rho.shape or v.size < 2:
            raise ConfigurationError("tabulated density needs >= 2 matching (v, rho) pairs")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(rho))):
            raise ConfigurationError("tabulated density contains non-finite values")
        if np.any(np.diff(v) <= 0):
            raise ConfigurationError("tabulated grid must be strictly increasing")
        if np.any(rho < 0):
            raise ConfigurationError("tabulated density must be nonnegative")
        mass = integrate.trapezoid(rho, v)
        if not mass > 0:
            raise ConfigurationError("tabulated density is not normalizable")
        rho = rho / mass
        seg = 0.5 * np.diff(v) * (rho[:-1] + rho[1:])
        cdf = np.concatenate([[0.0], np.cumsum(seg)])
        cdf /= cdf[-1]
        object.__setattr__(self, "grid_v", v)
        object.__setattr__(self, "grid_rho", rho)
        object.__setattr__(self, "_cdf", cdf)
        if not self.moment_order_r >= 0:
            raise ConfigurationError("moment_order_r must be >= 0")

    # constructors -------------------------------------------------------
    @classmethod
    def cauchy(cls) -> "DisorderSpec":
        return cls("cauchy")

    @classmethod
    def gaussian(cls) -> "DisorderSpec":
        return cls("gaussian")

    @classmethod
    def uniform(cls) -> "DisorderSpec":
        return cls("uniform")

    @classmethod
    def tabulated(cls, v, rho, moment_order_r: float = math.inf) -> "DisorderSpec":
        return cls("tabulated", np.asarray(v, float), np.asarray(rho, float), moment_order_r)

    @classmethod
    def from_csv(cls, path, moment_order_r: float = math.inf) -> "DisorderSpec":
        """Load a two-column ``v,rho`` CSV (a header line is allowed)."""
        try:
            data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        except ValueError:
            data = np.loadtxt(path, delimiter=",", comments="#", skiprows=1, ndmin=2)
        if data.shape[1] != 2:
            raise ConfigurationError(f"{path}: expected two columns (v, rho)")
        return cls.tabulated(data[:, 0], data[:, 1], moment_order_r)

    @classmethod
    def from_config(cls, cfg) -> "DisorderSpec":
        """Build from ``"cauchy"`` or ``{"kind": ..., parameters...}``."""
        if isinstance(cfg, DisorderSpec):
            return cfg
        if isinstance(cfg, str):
            cfg = {"kind": cfg}
        if not isinstance(cfg, dict) or "kind" not in cfg:
            raise ConfigurationError(f"bad disorder description {cfg!r}")
        kind = str(cfg["kind"]).lower()
        if kind == "tabulated":
            r = float(cfg.get("moment_order_r", math.inf))
            if "csv" in cfg:
                return cls.from_csv(Path(cfg["csv"]), r)
            if "v" in cfg and "rho" in cfg:
                return cls.tabulated(cfg["v"], cfg["rho"], r)
            raise ConfigurationError("tabulated disorder needs 'csv' or 'v'/'rho'")
        return cls(kind)

    def to_config(self) -> dict:
        if self.kind != "tabulated":
            return {"kind": self.kind}
        return {
            "kind": "tabulated",
            "v": self.grid_v.tolist(),
            "rho": self.grid_rho.tolist(),
            "moment_order_r": self.moment_order_r,
        }

    # equality/hash by content so specs can key caches
    def _key(self):
        if self.kind != "tabulated":
            return (self.kind,)
        return (self.kind, self.grid_v.tobytes(), self.grid_rho.tobytes(), self.moment_order_r)

    def __eq__(self, other):
        return isinstance(other, DisorderSpec) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    @property
    def sup_density(self) -> float:
        if self.kind == "tabulated":
            return float(self.grid_rho.max())
        return _SUP_DENSITY[self.kind]

    @property
    def bounded(self) -> bool:
        return self.kind in ("uniform", "tabulated")

    # distribution functions --------------------------------------------
    def density(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "cauchy":
            out = 1.0 / (math.pi * (1.0 + v * v))
        elif self.kind == "gaussian":
            out = np.exp(-0.5 * v * v) / math.sqrt(2.0 * math.pi)
        elif self.kind == "uniform":
            out = np.where(np.abs(v) <= 1.0, 0.5, 0.0)
        else:
            out = np.interp(v, self.grid_v, self.grid_rho, left=0.0, right=0.0)
        return out if out.ndim else float(out)

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "cauchy":
            out = 0.5 + np.arctan(v) / math.pi
        elif self.kind == "gaussian":
            out = special.ndtr(v)
        elif self.kind == "uniform":
            out = np.clip(0.5 * (v + 1.0), 0.0, 1.0)
        else:
            out = self._tab_cdf(v)
        return out if out.ndim else float(out)

    def _tab_cdf(self, v):
        gv, gr, c = self.grid_v, self.grid_rho, self._cdf
        i = np.clip(np.searchsorted(gv, v, side="right") - 1, 0, gv.size - 2)
        x = np.clip(v - gv[i], 0.0, gv[i + 1] - gv[i])
        h = gv[i + 1] - gv[i]
        slope = (gr[i + 1] - gr[i]) / h
        out = c[i] + gr[i] * x + 0.5 * slope * x * x
        return np.where(v < gv[0], 0.0, np.where(v >= gv[-1], 1.0, out))

    def ppf(self, u):
        """Inverse CDF."""
        u = np.asarray(u, dtype=float)
        if self.kind == "cauchy":
            return np.tan(math.pi * (u - 0.5))
        if self.kind == "gaussian":
            return special.ndtri(u)
        if self.kind == "uniform":
            return 2.0 * u - 1.0
        gv, gr, c = self.grid_v, self.grid_rho, self._cdf
        i = np.clip(np.searchsorted(c, u, side="right") - 1, 0, gv.size - 2)
        h = gv[i + 1] - gv[i]
        a = 0.5 * (gr[i + 1] - gr[i]) / h
        t = u - c[i]
        disc = np.sqrt(np.maximum(gr[i] ** 2 + 4.0 * a * t, 0.0))
        denom = gr[i] + disc
        x = np.where(denom > 0, 2.0 * t / np.where(denom > 0, denom, 1.0), 0.0)
        return gv[i] + np.clip(x, 0.0, h)

    def sample(self, rng, n: int) -> np.ndarray:
        """``n`` i.i.d. draws.  ``rng`` is an :class:`RngHandle` or a Generator."""
        if n < 1:
            raise ValueError("n must be >= 1")
        gen = rng.generator() if isinstance(rng, RngHandle) else rng
        if self.kind == "gaussian":
            return gen.standard_normal(n)
        if self.kind == "uniform":
            return gen.uniform(-1.0, 1.0, n)
        # inverse CDF keeps the Cauchy tails exact
        return self.ppf(gen.random(n))

    def support(self) -> tuple[float, float] | None:
        """Support interval, or ``None`` when unbounded."""
        if self.kind == "uniform":
            return (-1.0, 1.0)
        if self.kind == "tabulated":
            return (float(self.grid_v[0]), float(self.grid_v[-1]))
        return None


def sample(spec: DisorderSpec, rng_stream, n: int) -> np.ndarray:
    return spec.sample(rng_stream, n)


def density_at(spec: DisorderSpec, v: float) -> float:
    return spec.density(v)


def support_interval(spec: DisorderSpec):
    """``(lo, hi)`` for bounded laws, the string ``"unbounded"`` otherwise."""
    s = spec.support()
    return "unbounded" if s is None else s
