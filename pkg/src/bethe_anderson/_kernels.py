"""Compiled inner loops for the population-dynamics solver."""

import numpy as np
from numba import njit


@njit(cache=True)
def sweep_kernel(pool, lam_omega, picks, slots, z):
    """Sequential random-slot overwrite.

    Replacement i reads ``picks[i, :]`` from the *current* pool (so earlier
    replacements of the same sweep are visible) and writes slot ``slots[i]``.
    Returns ``(min Im, max |.|)`` of the pool afterwards.
    """
    K = picks.shape[1]
    for i in range(slots.shape[0]):
        acc = lam_omega[i] - z
        for j in range(K):
            acc -= pool[picks[i, j]]
        pool[slots[i]] = 1.0 / acc
    min_im = np.inf
    max_abs = 0.0
    for k in range(pool.shape[0]):
        v = pool[k]
        if v.imag < min_im:
            min_im = v.imag
        a = abs(v)
        if a > max_abs:
            max_abs = a
    return min_im, max_abs


@njit(cache=True)
def attach_kernel(particles, pool, lam_omega, picks, z):
    """``1 / (lam*omega - z - particle - sum of picked pool entries)``.

    Used to advance path particles toward the root (``picks`` = the K-1
    off-path children), to close a ray at the root (K picks) and, with zero
    particles and K+1 picks, to form full-lattice diagonal Green functions.
    """
    n, m = picks.shape
    out = np.empty(n, dtype=np.complex128)
    for i in range(n):
        acc = lam_omega[i] - z - particles[i]
        for j in range(m):
            acc -= pool[picks[i, j]]
        out[i] = 1.0 / acc
    return out
