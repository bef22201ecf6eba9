"""Reproducible Wiener increments and noise-coefficient evaluation.

Increments are generated counter-style: the tuple (seed, channel, mode,
step) is hashed into a fresh generator state, so any single increment can be
regenerated without replaying the path, ensemble members get disjoint
streams, and restarts are exact.  Each increment is N(0, dt).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHANNEL_V = 0
CHANNEL_W = 1

_CHANNELS = {"v": CHANNEL_V, "w": CHANNEL_W}


def _channel_id(channel) -> int:
    if isinstance(channel, str):
        return _CHANNELS[channel]
    return int(channel)


def increment_at(seed: int, step: int, dt: float, channel, mode: int = 0) -> float:
    """The single N(0, dt) increment for one (seed, step, channel, mode)."""
    ss = np.random.SeedSequence((int(seed), _channel_id(channel), int(mode), int(step)))
    z = np.random.Generator(np.random.PCG64(ss)).standard_normal()
    return float(np.sqrt(dt) * z)


def wiener_increments(
    seed: int, n_steps: int, dt: float, channel, mode: int = 0
) -> np.ndarray:
    """All increments of one channel/mode stream, shape (n_steps,)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cid = _channel_id(channel)
    out = np.empty(n_steps)
    root = np.sqrt(dt)
    for k in range(n_steps):
        ss = np.random.SeedSequence((int(seed), cid, int(mode), k))
        out[k] = np.random.Generator(np.random.PCG64(ss)).standard_normal()
    return root * out


@dataclass(frozen=True)
class NoisePath:
    """Seeded increment streams for the potential and gating channels.

    With n_modes > 1 the stream carries one increment per mode and step;
    mode k's contribution is scaled by 1/(k+1) at evaluation time so the
    summed amplitudes remain square-summable.
    """

    seed: int
    dt: float
    n_steps: int
    n_modes: int = 1

    def increments(self, channel) -> np.ndarray:
        """(n_steps, n_modes) array of N(0, dt) draws."""
        cols = [
            wiener_increments(self.seed, self.n_steps, self.dt, channel, mode=m)
            for m in range(self.n_modes)
        ]
        return np.column_stack(cols)


@dataclass(frozen=True)
class NoiseCoeff:
    """Noise amplitude as a function of the driven field.

    kind "constant": beta(z) = beta0.
    kind "linear-clipped": beta(z) = clip(beta0 z, +-beta0 z_cap), which is
    Lipschitz with constant beta0 and of linear growth, so both conditions
    |beta(z)|^2 <= C (1 + |z|^2) and |beta(z1) - beta(z2)| <= sqrt(C) |z1-z2|
    hold with C = beta0^2 max(1, z_cap^2).
    """

    kind: str = "constant"
    beta0: float = 0.0
    z_cap: float = 2.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear-clipped"):
            raise ValueError(f"unknown noise coefficient kind {self.kind!r}")
        if self.z_cap <= 0:
            raise ValueError("z_cap must be positive")

    @property
    def growth_cap(self) -> float:
        return self.beta0**2 * max(1.0, self.z_cap**2)


def eval_coeff(c: NoiseCoeff, z, mode: int = 0):
    """Amplitude at field value(s) z for one mode (mode k scaled by 1/(k+1))."""
    z = np.asarray(z, dtype=float)
    if c.kind == "constant":
        base = np.full_like(z, c.beta0)
    else:
        cap = abs(c.beta0) * c.z_cap
        base = np.clip(c.beta0 * z, -cap, cap)
    return base / (mode + 1)
