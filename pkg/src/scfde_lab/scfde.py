"""Block transmission model for single-carrier frequency-domain equalization.

A burst is a sequence of length-``n_data`` symbol blocks separated by guard
intervals. Two guard modes are supported:

* ``"uw"``  -- a known deterministic sequence follows each block; the receiver
  transforms block+guard jointly and subtracts the guard contribution, leaving
  ``y = H d + w`` with ``H`` built from the first n_data DFT columns.
* ``"cp"``  -- a cyclic prefix is stripped at the receiver, giving a circulant
  channel; ``H`` uses the full square DFT.

In both cases ``y = diag(g) M d + w`` with a real nonnegative diagonal ``g``
(the composite matched-filter response) and ``w ~ CN(0, n' * noise_var * diag(g))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, dft_matrix

__all__ = [
    "Alphabet",
    "make_alphabet",
    "SystemSpec",
    "SystemModel",
    "build_system",
    "modulate",
    "hard_decide",
    "component_indices",
    "symbols_to_onehot",
    "ebn0_to_noise_var",
    "Transmission",
    "transmit",
    "transmit_blocks",
]


@dataclass(frozen=True)
class Alphabet:
    """Square modulation alphabet with component-wise Gray mapping.

    ``levels`` are the ascending real component values (shared by real and
    imaginary parts); the full symbol set is their Cartesian product, scaled
    for unit mean symbol energy. ``code_of_level[i]`` is the Gray code carried
    by level index i, ``level_of_code`` its inverse.
    """

    name: str
    levels: np.ndarray
    bits_per_component: int
    code_of_level: np.ndarray
    level_of_code: np.ndarray
    symbols: np.ndarray = field(repr=False)  # full set, index = re_idx * L + im_idx

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def bits_per_symbol(self) -> int:
        return 2 * self.bits_per_component

    @property
    def sym_var(self) -> float:
        return 1.0  # enforced at construction time

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)


def make_alphabet(name: str) -> Alphabet:
    key = name.lower().replace("-", "")
    if key == "qpsk":
        raw = np.array([-1.0, 1.0])
        gray = np.array([0, 1])
    elif key in ("16qam", "qam16"):
        raw = np.array([-3.0, -1.0, 1.0, 3.0])
        gray = np.array([0, 1, 3, 2])
    else:
        raise ValueError(f"unknown alphabet {name!r}")
    levels = raw / np.sqrt(2.0 * np.mean(raw**2))
    if abs(2.0 * np.mean(levels**2) - 1.0) > 1e-12:
        raise AssertionError("alphabet normalization failed")
    level_of_code = np.empty(len(gray), dtype=np.int64)
    level_of_code[gray] = np.arange(len(gray))
    symbols = (levels[:, None] + 1j * levels[None, :]).ravel()
    return Alphabet(
        name=key,
        levels=levels,
        bits_per_component=int(np.log2(len(raw))),
        code_of_level=gray,
        level_of_code=level_of_code,
        symbols=symbols,
    )


@dataclass(frozen=True)
class SystemSpec:
    """Channel-independent description of a simulation setup."""

    mode: str          # "uw" | "cp"
    n_data: int
    n_guard: int
    alphabet: str

    def __post_init__(self):
        if self.mode not in ("uw", "cp"):
            raise ValueError(f"unknown guard mode {self.mode!r}")
        if self.n_data < 1 or self.n_guard < 0:
            raise ValueError("dimensions must be positive")

    @property
    def n_prime(self) -> int:
        return self.n_data + self.n_guard if self.mode == "uw" else self.n_data

    def make_alphabet(self) -> "Alphabet":
        return make_alphabet(self.alphabet)

    def bits_per_block(self) -> int:
        return self.n_data * self.make_alphabet().bits_per_symbol


@dataclass(frozen=True)
class SystemModel:
    """Immutable per-channel transmission model ``y = h_diag * (M d) + w``.

    ``m`` holds the first n_data DFT columns (UW) or the full square DFT (CP);
    its first row is all ones. ``h`` = diag(h_diag) @ m is precomputed.
    """

    mode: str             # "uw" | "cp"
    n_data: int
    n_guard: int
    n_prime: int
    m: np.ndarray         # (n_prime, n_data)
    h_diag: np.ndarray    # (n_prime,) real >= 0
    h: np.ndarray         # (n_prime, n_data)
    u: np.ndarray | None = None        # UW sequence (n_guard,), UW mode only
    m_prime: np.ndarray | None = None  # remaining DFT columns, UW mode only
    f_full: np.ndarray | None = None   # full DFT matrix, UW mode only


def build_system(mode: str, n_data: int, n_guard: int, h_diag, u=None) -> SystemModel:
    """Assemble the system model for one channel realization."""
    mode = mode.lower()
    h_diag = np.asarray(h_diag, dtype=np.float64)
    if np.any(h_diag < 0):
        raise ValueError("h_diag entries must be nonnegative")
    if mode == "uw":
        n_prime = n_data + n_guard
        if len(h_diag) != n_prime:
            raise ValueError(f"h_diag length {len(h_diag)} != n_data+n_guard={n_prime}")
        f = dft_matrix(n_prime)
        m = f[:, :n_data]
        m_prime = f[:, n_data:]
        if u is None:
            u = np.zeros(n_guard, dtype=np.complex128)
        else:
            u = np.asarray(u, dtype=np.complex128)
            if len(u) != n_guard:
                raise ValueError(f"UW length {len(u)} != n_guard={n_guard}")
        return SystemModel(mode, n_data, n_guard, n_prime, m, h_diag,
                           h_diag[:, None] * m, u, m_prime, f)
    if mode == "cp":
        n_prime = n_data
        if len(h_diag) != n_prime:
            raise ValueError(f"h_diag length {len(h_diag)} != n_data={n_prime}")
        if u is not None and np.any(np.asarray(u) != 0):
            raise ValueError("CP mode takes no UW sequence")
        m = dft_matrix(n_data)
        return SystemModel(mode, n_data, n_guard, n_prime, m, h_diag,
                           h_diag[:, None] * m)
    raise ValueError(f"unknown guard mode {mode!r}")


def modulate(bits, alphabet: Alphabet) -> np.ndarray:
    """Map bits to symbols, component-wise Gray coded, MSB first.

    ``bits`` has shape (..., n_data * bits_per_symbol); per symbol the first
    half of its bits drives the real part, the second half the imaginary part.
    """
    bits = np.asarray(bits)
    bpc = alphabet.bits_per_component
    if bits.shape[-1] % (2 * bpc) != 0:
        raise ValueError(
            f"bit count {bits.shape[-1]} not a multiple of {2 * bpc} bits/symbol"
        )
    grouped = bits.reshape(bits.shape[:-1] + (-1, 2, bpc))
    weights = 1 << np.arange(bpc - 1, -1, -1)
    codes = np.tensordot(grouped, weights, axes=(-1, 0))
    idx = alphabet.level_of_code[codes]
    comp = alphabet.levels[idx]
    return comp[..., 0] + 1j * comp[..., 1]


def component_indices(d, alphabet: Alphabet) -> np.ndarray:
    """Nearest level index per real/imag component; shape (..., 2).

    Ties at midpoints resolve to the lower level index.
    """
    d = np.asarray(d, dtype=np.complex128)
    mid = (alphabet.levels[1:] + alphabet.levels[:-1]) / 2.0
    re_idx = np.searchsorted(mid, d.real, side="left")
    im_idx = np.searchsorted(mid, d.imag, side="left")
    return np.stack([re_idx, im_idx], axis=-1)


def hard_decide(d_hat, alphabet: Alphabet) -> np.ndarray:
    """Slice symbol estimates to bits (inverse of :func:`modulate`)."""
    idx = component_indices(d_hat, alphabet)
    codes = alphabet.code_of_level[idx]
    bpc = alphabet.bits_per_component
    shifts = np.arange(bpc - 1, -1, -1)
    bits = (codes[..., None] >> shifts) & 1
    return bits.reshape(bits.shape[:-3] + (-1,)).astype(np.uint8)


def symbols_to_onehot(d, alphabet: Alphabet) -> np.ndarray:
    """One-hot component labels of shape (..., 2, n_levels) for exact symbols."""
    idx = component_indices(d, alphabet)
    return (idx[..., None] == np.arange(alphabet.n_levels)).astype(np.float64)


def ebn0_to_noise_var(ebn0_db: float, alphabet: Alphabet) -> float:
    """Time-domain noise variance for a target Eb/N0 in dB.

    noise_var = sym_var / (bits_per_symbol * 10^(ebn0_db/10)); guard-interval
    overhead and pulse-shaping gain are deliberately not folded in, so the
    mapping is monotone but absolute dB calibration is conventional.
    """
    return alphabet.sym_var / (alphabet.bits_per_symbol * 10.0 ** (ebn0_db / 10.0))


@dataclass
class Transmission:
    """One simulated block at the equalizer input."""

    bits: np.ndarray | None
    d: np.ndarray
    y: np.ndarray
    noise_var: float


def _sample_noise(rng: Rng, model: SystemModel, noise_var: float, n_blocks: int):
    std = np.sqrt(model.n_prime * noise_var * model.h_diag)
    return rng.complex_normal((n_blocks, model.n_prime)) * std


def transmit_blocks(d, model: SystemModel, noise_var: float, rng: Rng) -> np.ndarray:
    """Simulate reception of stacked blocks ``d`` (n_blocks, n_data) -> y.

    UW mode follows the literal receive chain: the guard sequence is
    transmitted inside the DFT window and its known contribution subtracted
    afterwards, which cancels exactly.
    """
    d = np.atleast_2d(np.asarray(d, dtype=np.complex128))
    if d.shape[1] != model.n_data:
        raise ValueError(f"block length {d.shape[1]} != n_data={model.n_data}")
    if noise_var < 0:
        raise ValueError("noise_var must be >= 0")
    w = _sample_noise(rng, model, noise_var, d.shape[0])
    if model.mode == "uw":
        x = np.concatenate([d, np.tile(model.u, (d.shape[0], 1))], axis=1)
        y_r = (x @ model.f_full.T) * model.h_diag + w
        return y_r - model.h_diag * (model.m_prime @ model.u)
    return (d @ model.m.T) * model.h_diag + w


def transmit(d, model: SystemModel, noise_var: float, rng: Rng,
             alphabet: Alphabet | None = None) -> Transmission:
    """Simulate one block; bits are recovered from ``d`` when the alphabet is given."""
    d = np.asarray(d, dtype=np.complex128)
    y = transmit_blocks(d[None, :], model, noise_var, rng)[0]
    bits = hard_decide(d, alphabet) if alphabet is not None else None
    return Transmission(bits=bits, d=d, y=y, noise_var=noise_var)
