"""Splittable, counter-based random streams.

Every stream is identified by a master seed and a path of non-negative
integers.  The path is hashed by :class:`numpy.random.SeedSequence` into a
Philox key, so a stream depends only on its logical address and never on
the order in which workers ask for it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import stats

MASK64 = (1 << 64) - 1


def float_key(x: float) -> int:
    """Map a float to a non-negative integer usable as a path element."""
    return struct.unpack("<Q", struct.pack("<d", float(x)))[0]


@dataclass(frozen=True)
class RngHandle:
    master_seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "master_seed", int(self.master_seed) & MASK64)
        path = tuple(int(p) for p in self.path)
        if any(p < 0 for p in path):
            raise ValueError("stream path elements must be non-negative")
        object.__setattr__(self, "path", path)

    @property
    def stream_id(self) -> tuple[int, ...]:
        return self.path

    def derive(self, path: Iterable[int]) -> "RngHandle":
        return derive(self, path)

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.master_seed, spawn_key=self.path)

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(self.seed_sequence()))

    def to_dict(self) -> dict:
        return {"master_seed": self.master_seed, "path": list(self.path)}


def derive(master: RngHandle, path: Iterable[int]) -> RngHandle:
    """Child stream at ``master.path + path``.

    Derivation is pure, so ``derive(derive(s, [a]), [b]) == derive(s, [a, b])``.
    """
    return RngHandle(master.master_seed, master.path + tuple(int(p) for p in path))


def battery(handle: RngHandle, n: int = 1_000_000) -> dict[str, float]:
    """Run a small statistical test battery on the first ``n`` outputs.

    Returns a mapping test name -> p-value.  Covers uniformity of doubles
    (KS), byte frequencies (chi-square), single-bit frequencies, lag-1
    serial correlation and the gap between consecutive draws below 1/2
    (a runs test).
    """
    raw = handle.generator().bit_generator.random_raw(n).astype(np.uint64)
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53

    out: dict[str, float] = {}
    out["ks_uniform"] = float(stats.kstest(u, "uniform").pvalue)

    counts = np.bincount(raw.view(np.uint8), minlength=256)
    out["chi2_bytes"] = float(stats.chisquare(counts).pvalue)

    # frequencies of each of the 64 bits, aggregated as a chi-square
    bits = np.array([np.count_nonzero((raw >> np.uint64(b)) & np.uint64(1)) for b in range(64)])
    z = (bits - n / 2) / np.sqrt(n / 4)
    out["bit_frequency"] = float(stats.chi2.sf(np.sum(z**2), df=64))

    x = u - 0.5
    rho = np.dot(x[:-1], x[1:]) / np.dot(x, x)
    out["serial_lag1"] = float(2 * stats.norm.sf(abs(rho) * np.sqrt(n)))

    above = u > 0.5
    n1 = int(above.sum())
    n0 = n - n1
    runs = 1 + int(np.count_nonzero(above[1:] != above[:-1]))
    mu = 2 * n0 * n1 / n + 1
    var = (mu - 1) * (mu - 2) / (n - 1)
    out["runs"] = float(2 * stats.norm.sf(abs(runs - mu) / np.sqrt(var)))
    return out

