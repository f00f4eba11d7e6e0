"""Closed forms for the free tree and for Cauchy disorder.

These are exact and cheap, and double as oracles for the Monte Carlo code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .disorder import DisorderSpec
from .errors import DomainError


def check_K(K) -> int:
    if int(K) != K or K < 2:
        raise DomainError(f"branching number K must be an integer >= 2, got {K!r}")
    return int(K)


def _as_z(z):
    z = np.asarray(z, dtype=complex)
    if np.any(z.imag < 0):
        raise DomainError("spectral parameter must lie in the closed upper half-plane")
    return z


def gamma0(K: int, z):
    """Truncated Green function of the free rooted tree.

    The root of ``K*G**2 + z*G + 1 = 0`` with ``Im G > 0`` for ``Im z > 0``
    and its limit from above on the real axis.  Accepts scalars or arrays.
    """
    K = check_K(K)
    z = _as_z(z)
    E, eta = z.real, z.imag
    edge = 2.0 * math.sqrt(K)
    on_axis = eta == 0
    if np.any(on_axis & (np.abs(E) == edge)):
        raise DomainError("gamma0 is not defined at the band edges |E| = 2*sqrt(K) for eta = 0")

    out = np.empty(z.shape, dtype=complex)

    # interior of the upper half-plane: pick the Herglotz root, computing
    # the small root from the product 1/K to avoid cancellation
    zi = z[~on_axis]
    s = np.sqrt(zi * zi - 4.0 * K)
    r1 = (-zi + s) / (2.0 * K)
    r2 = (-zi - s) / (2.0 * K)
    big = np.where(np.abs(r1) >= np.abs(r2), r1, r2)
    small = 1.0 / (K * big)
    out[~on_axis] = np.where(big.imag > small.imag, big, small)

    Er = E[on_axis]
    vals = np.empty(Er.shape, dtype=complex)
    inside = np.abs(Er) < edge
    Ei = Er[inside]
    vals[inside] = (-Ei + 1j * np.sqrt(4.0 * K - Ei * Ei)) / (2.0 * K)
    Eo = Er[~inside]
    # limit from above outside the band: the real root of smaller modulus
    vals[~inside] = -2.0 / (Eo + np.sign(Eo) * np.sqrt(Eo * Eo - 4.0 * K))
    out[on_axis] = vals
    return out[()] if out.ndim == 0 else out


def green_root_free(K: int, z):
    """Diagonal Green function G(0,0;z) of the free Bethe lattice."""
    K = check_K(K)
    z = _as_z(z)
    return 1.0 / (-z - (K + 1) * gamma0(K, z))


def lyapunov_exact_free(K: int, z):
    """L_0(z) = -log|gamma0(K, z)|."""
    return -np.log(np.abs(gamma0(K, z)))


def lyapunov_exact_cauchy(K: int, lam, E):
    """Lyapunov exponent for standard Cauchy disorder of strength ``lam``.

    Averaging over a Cauchy potential shifts the spectral parameter by
    ``i*lam``, so the answer is ``L_0(E + i*lam)``.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise DomainError("disorder strength must be >= 0")
    return lyapunov_exact_free(K, np.asarray(E, dtype=float) + 1j * lam)


def spectrum_edges(K: int, lam: float, disorder: DisorderSpec):
    """Almost-sure spectrum ``[-2 sqrt K, 2 sqrt K] + lam * supp P0``.

    Returns ``(lo, hi)`` or the string ``"all reals"``.
    """
    K = check_K(K)
    edge = 2.0 * math.sqrt(K)
    if lam == 0:
        return (-edge, edge)
    supp = disorder.support()
    if supp is None:
        return "all reals"
    return (-edge + lam * supp[0], edge + lam * supp[1])


@dataclass(frozen=True)
class Thresholds:
    lambda_min: float
    lambda_c_upper: float
    lambda_c_lower: float | None = None


def lambda_thresholds(K: int, disorder: DisorderSpec) -> Thresholds:
    """Disorder thresholds.

    ``lambda_min``: below it the Lyapunov criterion holds at the band edge
    for bounded disorder.  ``lambda_c_upper``: above it the fractional
    moment bound certifies complete localization.  ``lambda_c_lower`` is
    only known for Cauchy disorder.
    """
    K = check_K(K)
    rho = disorder.sup_density
    if not math.isfinite(rho):
        raise DomainError("sup_density must be finite")
    lower = float(K - 1) if disorder.kind == "cauchy" else None
    return Thresholds(
        lambda_min=(math.sqrt(K) - 1.0) ** 2 / 2.0,
        lambda_c_upper=rho * K * (math.e * math.log(K) + 1.0),
        lambda_c_lower=lower,
    )


def log_C_s(s, lam: float, sup_density: float):
    """log of the conditional fractional-moment bound C_s(lam)."""
    s = np.asarray(s, dtype=float)
    if np.any((s <= 0) | (s >= 1)):
        raise DomainError("s must lie in (0, 1)")
    if lam <= 0:
        return np.full(s.shape, np.inf)[()]
    return s * math.log(sup_density) - np.log1p(-s) - s * math.log(lam)


def _min_over_s(lam: float, scale: float) -> tuple[float, float]:
    # min over s of s*log(scale/lam) - log(1-s)
    if lam <= 0:
        return math.inf, 0.0
    x = math.log(lam / scale)
    if x <= 1.0:
        return 0.0, 0.0
    return -(x - 1.0) + math.log(x), 1.0 - 1.0 / x


def min_log_C_s(lam: float, sup_density: float) -> tuple[float, float]:
    """``(min_s log C_s(lam), argmin)`` over s in (0, 1).

    When ``lam < e * sup_density`` the infimum is 0, approached as s -> 0.
    """
    return _min_over_s(lam, sup_density)


def log_fractional_moment_bound(s, lam: float, sup_density: float):
    """log of ``sup_a E|1/(lam*omega - a)|^s = (2 rho)^s / ((1 - s) lam^s)``.

    The supremum is attained by piling density ``rho`` on an interval of
    length ``1/rho`` centred at ``a/lam``.  This exceeds ``C_s`` by the
    factor ``2^s``, and unlike ``C_s`` it is a valid bound for every law.
    """
    return log_C_s(s, lam, sup_density) + np.asarray(s, dtype=float) * math.log(2.0)


def min_log_fractional_moment_bound(lam: float, sup_density: float) -> tuple[float, float]:
    """``(min_s, argmin)`` of :func:`log_fractional_moment_bound`."""
    return _min_over_s(lam, 2.0 * sup_density)


def diffusion_kernel(K: int, distance: int) -> float:
    """<delta_x, (-Delta)^{-1} delta_0> on the Bethe lattice for |x| = distance.

    Radially, ``(K+1) u_r - u_{r-1} - K u_{r+1} = 0`` for r >= 1, whose
    decaying solution is ``u_r = C K^{-r}``; the equation at the origin,
    ``(K+1)(u_0 - u_1) = 1``, fixes ``C = K / (K^2 - 1)``.
    """
    K = check_K(K)
    if distance < 0:
        raise DomainError("distance must be >= 0")
    return K / (K * K - 1.0) * float(K) ** (-distance)


def kesten_mckay_dos(K: int, E):
    """Density of states of the free Bethe lattice, Im G(0,0;E+i0)/pi."""
    K = check_K(K)
    E = np.asarray(E, dtype=float)
    edge = 2.0 * math.sqrt(K)
    inside = np.abs(E) < edge
    Ein = np.where(inside, E, 0.0)
    g = green_root_free(K, Ein + 0j)
    out = np.where(inside, np.maximum(np.imag(g), 0.0) / math.pi, 0.0)
    return out[()] if out.ndim == 0 else out


def kesten_mckay_cdf(K: int, E: float) -> float:
    """Integrated density of states of the free Bethe lattice."""
    K = check_K(K)
    edge = 2.0 * math.sqrt(K)
    if E <= -edge:
        return 0.0
    if E >= edge:
        return 1.0
    val, _ = integrate.quad(lambda e: kesten_mckay_dos(K, e), -edge, E, limit=200)
    return float(val)
