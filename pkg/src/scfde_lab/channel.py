"""Multipath channel sampling and the composite diagonal frequency response.

Channels are tapped delay lines with circularly symmetric complex Gaussian
taps (Rayleigh magnitude, uniform phase) and an exponentially decaying power
profile parameterised by the RMS delay spread. Each realization is
energy-normalized to 1. After receiver-side matched filtering the per-block
channel collapses to a real nonnegative diagonal: the squared magnitude of
the zero-padded tap DFT. Deep spectral fades (exact zeros) are possible and
downstream code must tolerate them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Rng

__all__ = [
    "ChannelParams",
    "default_n_taps",
    "sample_channel",
    "composite_diag",
    "save_channel_set",
    "load_channel_set",
]


@dataclass(frozen=True)
class ChannelParams:
    """Tapped-delay-line model: tap l has variance ~ exp(-l*t_s/tau_rms)."""

    tau_rms: float  # RMS delay spread in seconds
    t_s: float      # baseband sampling time in seconds (tap spacing)
    n_taps: int

    def __post_init__(self):
        if self.tau_rms <= 0:
            raise ValueError("tau_rms must be > 0")
        if self.t_s <= 0:
            raise ValueError("t_s must be > 0")
        if self.n_taps < 1:
            raise ValueError("n_taps must be >= 1")


def default_n_taps(tau_rms: float, t_s: float, n_guard: int, coverage: float = 0.999) -> int:
    """Smallest tap count whose profile holds `coverage` of the total energy.

    Capped at the guard length so consecutive blocks stay independent.
    """
    if not 0 < coverage < 1:
        raise ValueError("coverage must be in (0, 1)")
    n = math.ceil(tau_rms / t_s * math.log(1.0 / (1.0 - coverage)))
    return max(1, min(n, n_guard))


def sample_channel(rng: Rng, params: ChannelParams) -> np.ndarray:
    """Draw one tap vector; returns complex taps with unit total energy."""
    decay = np.exp(-np.arange(params.n_taps) * params.t_s / params.tau_rms)
    decay /= decay.sum()
    taps = rng.complex_normal(params.n_taps) * np.sqrt(decay)
    energy = np.linalg.norm(taps)
    if energy == 0.0:  # probability zero, but keep the contract airtight
        taps[0] = 1.0
        return taps
    return taps / energy


def composite_diag(taps: np.ndarray, n_prime: int) -> np.ndarray:
    """Real diagonal of the composite frequency response: |DFT(taps, n')|^2.

    Requires len(taps) <= n_prime. With unit-energy taps the diagonal sums to
    n_prime (Parseval).
    """
    taps = np.asarray(taps, dtype=np.complex128)
    if taps.ndim != 1:
        raise ValueError("taps must be a 1-D array")
    if len(taps) > n_prime:
        raise ValueError(f"n_taps={len(taps)} exceeds n_prime={n_prime}")
    spectrum = np.fft.fft(taps, n_prime)
    return np.abs(spectrum) ** 2


def save_channel_set(path, taps_by_id: dict[int, np.ndarray]) -> None:
    """Persist channels as CSV rows ``channel_id,tap_index,re,im``.

    Floats are written with 17 significant digits so they round-trip exactly.
    """
    with open(path, "w", encoding="ascii") as fh:
        fh.write("channel_id,tap_index,re,im\n")
        for cid in sorted(taps_by_id):
            for l, tap in enumerate(taps_by_id[cid]):
                fh.write(f"{cid},{l},{tap.real:.17g},{tap.imag:.17g}\n")


def load_channel_set(path) -> dict[int, np.ndarray]:
    taps: dict[int, list[complex]] = {}
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != "channel_id,tap_index,re,im":
            raise ValueError(f"unrecognized channel set header: {header!r}")
        for line in fh:
            cid_s, idx_s, re_s, im_s = line.strip().split(",")
            taps.setdefault(int(cid_s), []).append(
                (int(idx_s), complex(float(re_s), float(im_s)))
            )
    out = {}
    for cid, entries in taps.items():
        entries.sort()
        out[cid] = np.array([t for _, t in entries], dtype=np.complex128)
    return out
