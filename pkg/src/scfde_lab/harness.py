"""BER Monte-Carlo sweeps, an exact tiny-instance MAP oracle, analytical
complexity calculators (real-multiplication counts), and CSV reporting.

Sweeps are paired: every roster estimator sees exactly the same transmitted
symbols, noise and channel realizations, so BER differences are never an
artifact of separate randomness. Aggregation is a sum of integer counts over
(channel, SNR) cells with per-cell derived random sub-streams, which makes
results independent of worker scheduling.
"""
from __future__ import annotations

import concurrent.futures
import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from . import unfolded
from .channel import ChannelParams, composite_diag, sample_channel
from .equalizers import (
    DEFAULT_JITTER,
    CovarianceConditionError,
    SicConfig,
    dfe,
    iterative_sic,
    lmmse,
    lmmse_diag,
)
from .numerics import NotPositiveDefiniteError, Rng
from .scfde import (
    SystemModel,
    SystemSpec,
    build_system,
    ebn0_to_noise_var,
    hard_decide,
    modulate,
    transmit_blocks,
)
from .training import normalize_instance

__all__ = [
    "SweepConfig",
    "EqualizerSpec",
    "BerRow",
    "BerReport",
    "build_equalizer",
    "ber_sweep",
    "map_oracle",
    "binomial_ci",
    "ComplexityInput",
    "COMPLEXITY_TAGS",
    "complexity",
    "round_to_hundreds",
    "write_csv",
    "write_manifest",
]


@dataclass(frozen=True)
class SweepConfig:
    ebn0_db: tuple
    n_channels: int
    blocks_per_burst: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.ebn0_db) == 0:
            raise ValueError("ebn0_db grid must be non-empty")
        if self.n_channels < 1 or self.blocks_per_burst < 1:
            raise ValueError("n_channels and blocks_per_burst must be positive")


@dataclass(frozen=True)
class EqualizerSpec:
    """Declarative roster entry; workers rebuild the callable from it."""

    kind: str                  # lmmse | lmmse_diag | dfe | itsic | map | unfolded
    n_iter: int = 1            # itsic iterations
    jitter: float = DEFAULT_JITTER
    checkpoint: str | None = None

    def __post_init__(self):
        if self.kind not in ("lmmse", "lmmse_diag", "dfe", "itsic", "map", "unfolded"):
            raise ValueError(f"unknown equalizer kind {self.kind!r}")
        if self.kind == "unfolded" and not self.checkpoint:
            raise ValueError("unfolded equalizer needs a checkpoint path")


@lru_cache(maxsize=8)
def _load_model(path):
    return unfolded.load_checkpoint(path)


def build_equalizer(espec: EqualizerSpec, alphabet):
    """Turn a roster entry into ``fn(system, y_blocks, noise_var) -> bits``."""
    sym_var = alphabet.sym_var
    if espec.kind == "lmmse":
        return lambda sys_, y, nv: hard_decide(lmmse(sys_, y, nv, sym_var), alphabet)
    if espec.kind == "lmmse_diag":
        return lambda sys_, y, nv: hard_decide(
            lmmse_diag(sys_, y, nv, sym_var, allow_uw_approx=True), alphabet)
    if espec.kind == "dfe":
        return lambda sys_, y, nv: hard_decide(
            dfe(sys_, y, nv, sym_var, alphabet), alphabet)
    if espec.kind == "itsic":
        cfg = SicConfig(n_iter=espec.n_iter, jitter=espec.jitter)
        return lambda sys_, y, nv: hard_decide(
            iterative_sic(sys_, y, nv, sym_var, cfg, alphabet)[0], alphabet)
    if espec.kind == "map":
        return lambda sys_, y, nv: map_oracle(sys_, y, nv, alphabet)
    model = _load_model(espec.checkpoint)

    def _unfolded_eq(sys_, y, nv):
        inst = normalize_instance(y, sys_.h_diag, sys_.m, nv)
        h = inst.h_diag[:, None] * sys_.m
        stages, _ = unfolded.forward(model, inst.y, h, inst.h_diag,
                                     inst.noise_var_eff, sys_.m)
        return unfolded.hard_bits(stages[-1], alphabet)

    return _unfolded_eq


@dataclass
class BerRow:
    equalizer: str
    ebn0_db: float
    bits: int
    errors: int

    @property
    def ber(self) -> float:
        return self.errors / self.bits if self.bits else math.nan

    def ci95(self):
        return binomial_ci(self.errors, self.bits)


@dataclass
class BerReport:
    roster: tuple
    ebn0_db: tuple
    rows: list
    excluded_blocks: int = 0
    seed: int = 0

    def row(self, equalizer: str, ebn0_db: float) -> BerRow:
        for r in self.rows:
            if r.equalizer == equalizer and r.ebn0_db == ebn0_db:
                return r
        raise KeyError((equalizer, ebn0_db))


def binomial_ci(errors: int, n: int, z: float = 1.959963984540054):
    """95% Wilson score interval for an error proportion."""
    if n == 0:
        return (0.0, 1.0)
    p = errors / n
    denom = 1.0 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z**2 / (4 * n**2)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def _cell_counts(spec, chan, roster, cfg, c_idx):
    """Error counts for one channel across the full SNR grid (paired draws)."""
    alphabet = spec.make_alphabet()
    rng = Rng(cfg.seed)
    taps = sample_channel(rng.substream("chan", c_idx), chan)
    h_diag = composite_diag(taps, spec.n_prime)
    system = build_system(spec.mode, spec.n_data, spec.n_guard, h_diag)
    eqs = {name: build_equalizer(es, alphabet) for name, es in roster.items()}
    n_bits = spec.bits_per_block()
    counts = {(name, j): 0 for name in roster for j in range(len(cfg.ebn0_db))}
    bits_done = [0] * len(cfg.ebn0_db)
    excluded = 0
    for j, ebn0 in enumerate(cfg.ebn0_db):
        nv = ebn0_to_noise_var(ebn0, alphabet)
        bits = rng.substream("bits", c_idx, j).integers(
            0, 2, (cfg.blocks_per_burst, n_bits)).astype(np.uint8)
        d = modulate(bits, alphabet)
        y = transmit_blocks(d, system, nv, rng.substream("noise", c_idx, j))
        decisions = {}
        failed = False
        for name, eq in eqs.items():
            try:
                decisions[name] = eq(system, y, nv)
            except (NotPositiveDefiniteError, CovarianceConditionError):
                failed = True
                break
        if failed:
            # Keep the comparison paired: drop the burst for every estimator.
            excluded += cfg.blocks_per_burst
            continue
        for name, dec in decisions.items():
            counts[(name, j)] += int((dec != bits).sum())
        bits_done[j] += bits.size
    return counts, bits_done, excluded


def ber_sweep(cfg: SweepConfig, spec: SystemSpec, chan: ChannelParams,
              roster: dict, threads: int = 1) -> BerReport:
    """Paired Monte-Carlo BER sweep over channels x SNR grid.

    ``roster`` maps display names to :class:`EqualizerSpec`. Deterministic
    under (cfg.seed, roster): per-cell random sub-streams make the result
    independent of the number of workers.
    """
    if not roster:
        raise ValueError("empty roster")
    totals = {(name, j): 0 for name in roster for j in range(len(cfg.ebn0_db))}
    bits_total = [0] * len(cfg.ebn0_db)
    excluded = 0
    if threads <= 1:
        results = (_cell_counts(spec, chan, roster, cfg, c)
                   for c in range(cfg.n_channels))
    else:
        pool = concurrent.futures.ProcessPoolExecutor(max_workers=threads)
        results = pool.map(_cell_counts,
                           *zip(*[(spec, chan, roster, cfg, c)
                                  for c in range(cfg.n_channels)]))
    for counts, bits_done, exc in results:
        for key, v in counts.items():
            totals[key] += v
        for j, v in enumerate(bits_done):
            bits_total[j] += v
        excluded += exc
    if threads > 1:
        pool.shutdown()
    rows = [BerRow(name, ebn0, bits_total[j], totals[(name, j)])
            for name in roster for j, ebn0 in enumerate(cfg.ebn0_db)]
    return BerReport(roster=tuple(roster), ebn0_db=tuple(cfg.ebn0_db),
                     rows=rows, excluded_blocks=excluded, seed=cfg.seed)


# ---------------------------------------------------------------------------
# Exact bit-wise MAP by enumeration (tiny instances only).
# ---------------------------------------------------------------------------

def _candidate_table(n_data: int, alphabet):
    n_bits = n_data * alphabet.bits_per_symbol
    n_cand = 1 << n_bits
    ints = np.arange(n_cand, dtype=np.uint64)
    shifts = np.arange(n_bits - 1, -1, -1, dtype=np.uint64)
    bits = ((ints[:, None] >> shifts) & 1).astype(np.uint8)
    return bits, modulate(bits, alphabet)


def map_oracle(model: SystemModel, y, noise_var: float, alphabet) -> np.ndarray:
    """Exact bit-wise MAP decisions by full enumeration of the data vectors.

    Every candidate vector is scored with the exact Gaussian log-likelihood
    (noise covariance n' * noise_var * diag(g)); each bit is decided by the
    larger log-sum-exp over candidates carrying that bit value. Refuses
    instances with more than 10^6 candidates.
    """
    n_cand = alphabet.n_symbols**model.n_data
    if n_cand > 10**6:
        raise ValueError(f"instance too large for exact MAP ({n_cand} candidates)")
    if noise_var <= 0:
        raise ValueError("map_oracle needs noise_var > 0")
    y = np.asarray(y, dtype=np.complex128)
    single = y.ndim == 1
    yb = np.atleast_2d(y)
    cand_bits, cand_d = _candidate_table(model.n_data, alphabet)
    x = cand_d @ model.h.T  # (n_cand, n')
    var = model.n_prime * noise_var * model.h_diag
    valid = model.h_diag > 1e-300  # faded coordinates carry no information
    inv = 1.0 / var[valid]
    diff = yb[:, None, valid] - x[None, :, valid]
    ll = -np.einsum("bcn,n->bc", np.abs(diff) ** 2, inv)
    n_bits = cand_bits.shape[1]
    out = np.empty((yb.shape[0], n_bits), dtype=np.uint8)
    for j in range(n_bits):
        ones = cand_bits[:, j] == 1
        lse1 = logsumexp(ll[:, ones], axis=1)
        lse0 = logsumexp(ll[:, ~ones], axis=1)
        out[:, j] = (lse1 > lse0).astype(np.uint8)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Complexity calculators: exact real-multiplication counts per estimator.
# Divisions count as multiplications; a complex*complex product costs 4, a
# real*complex product 2. Fractional intermediate terms stay exact.
# ---------------------------------------------------------------------------

COMPLEXITY_TAGS = (
    "SICNNv1", "SICNNv2", "DetNet", "KAFCNN", "OAMPNet2",
    "LMMSE_burst", "LMMSE_eq", "LMMSE_CP_burst", "LMMSE_CP_eq",
    "DFE_burst", "DFE_eq", "itSIC",
)


@dataclass(frozen=True)
class ComplexityInput:
    """Dimensions and hyperparameters feeding one estimator's count.

    ``n_levels`` is the per-component alphabet size. ``n_iter`` is the
    stage/iteration/layer count (Q, L or T depending on the estimator);
    widths are per-method: v1 uses the four precision/probability sub-network
    fields, v2 the plain depth/width pair, DetNet hidden and auxiliary sizes.
    """

    tag: str
    n_data: int
    n_prime: int
    n_guard: int = 0
    n_levels: int = 2
    n_iter: int = 0
    n_layers_prec: int = 0
    n_hidden_prec: int = 0
    n_layers_prob: int = 0
    n_hidden_prob: int = 0
    n_layers: int = 0
    n_hidden: int = 0
    det_hidden: int = 0
    det_aux: int = 0

    def __post_init__(self):
        if self.tag not in COMPLEXITY_TAGS:
            raise ValueError(f"unknown complexity tag {self.tag!r}")
        if self.n_data < 1 or self.n_prime < 1:
            raise ValueError("dimensions must be positive")


def _norm_cost(nd, n):
    # kappa, scaling of the diagonal, the received vector, and the response
    return Fraction(4 * nd * n + 4 * n + 1)


def complexity(inp: ComplexityInput):
    """Exact multiplication count; returns (raw, rounded_to_hundreds)."""
    nd = Fraction(inp.n_data)
    n = Fraction(inp.n_prime)
    ng = Fraction(inp.n_guard)
    lv = Fraction(inp.n_levels)
    q = Fraction(inp.n_iter)
    tag = inp.tag
    if tag == "SICNNv1":
        nhp, nlp = Fraction(inp.n_hidden_prob), Fraction(inp.n_layers_prob)
        nhc, nlc = Fraction(inp.n_hidden_prec), Fraction(inp.n_layers_prec)
        m_kq = (nhp**2 * (nlp - 1) + nhp * (2 * lv + 3)
                + nhc**2 * (nlc - 1) + nhc * (4 * n + 1)
                + 19 * n + 6 * lv + 6 * n * nd + 11)
        raw = q * nd * m_kq + _norm_cost(nd, n)
    elif tag == "SICNNv2":
        nh, nl = Fraction(inp.n_hidden), Fraction(inp.n_layers)
        m_kq = ((nl // 3) * (6 * n + 2) + nh**2 * (nl - 1) + 4 * n * nd
                + 10 * n + nh * (4 * n + 2 * lv + 3) + 6 * lv + 6)
        raw = q * nd * m_kq + _norm_cost(nd, n)
    elif tag == "DetNet":
        dh, dv = Fraction(inp.det_hidden), Fraction(inp.det_aux)
        m_q = (4 * nd**2 + 6 * nd + 2 * dh * (nd * (lv + 1) + dv)
               + 2 * nd * lv + dv)
        raw = (q * m_q - 2 * nd * lv + _norm_cost(nd, n)
               + 6 * nd * n + 4 * nd**2 * n + 2 * n)
    elif tag == "KAFCNN":
        nh, nl = Fraction(inp.n_hidden), Fraction(inp.n_layers)
        raw = ((3 * n + (nl - 1) * nh + 2 * n * lv + (nl - 2)) * nh
               + 4 * n * nd * lv + 2 * nd * lv + _norm_cost(nd, n))
    elif tag == "OAMPNet2":
        r_t = 8 * nd * n + 2 * nd
        tau = 4 * nd**2 * (2 * n + 1) + 8 * nd * n + 5
        xhat = (Fraction(14, 3) * n**3 + 8 * n**2 * (2 * nd + 1)
                + 8 * nd * (n + lv + Fraction(1, 2)) + 2)
        v_t = 2 * nd * (2 * n + 1) + 1
        raw = q * (r_t + tau + xhat + v_t) + _norm_cost(nd, n)
    elif tag == "LMMSE_burst":
        raw = Fraction(38, 3) * nd**3 + 8 * nd**2 * ng + 4 * nd**2
    elif tag == "LMMSE_eq":
        raw = 4 * nd * (nd + ng)
    elif tag == "LMMSE_CP_burst":
        raw = 4 * nd
    elif tag == "LMMSE_CP_eq":
        log2 = math.log2(inp.n_data)
        if log2 == int(log2):
            raw = 4 * nd + 2 * nd * Fraction(int(log2))
        else:  # non-power-of-two block: the IDFT term is irrational
            raw = Fraction(4 * inp.n_data + 2 * inp.n_data * log2)
    elif tag == "DFE_burst":
        raw = (Fraction(7, 6) * nd**4 + Fraction(11, 3) * nd**3
               + Fraction(19, 6) * nd**2 + 6 * nd**2 * n
               + Fraction(2, 3) * nd + 2 * nd * n - Fraction(14, 3))
    elif tag == "DFE_eq":
        raw = 8 * nd * n
    else:  # itSIC
        raw = q * nd * (Fraction(14, 3) * n**3 + 4 * n**2 * nd + 4 * n**2
                        + 2 * n * nd + 14 * n + 6 * lv + 6)
    return raw, round_to_hundreds(raw)


def round_to_hundreds(x) -> int:
    """Round to the nearest hundred, halves away from zero."""
    frac = Fraction(x) if not isinstance(x, Fraction) else x
    sign = -1 if frac < 0 else 1
    mag = abs(frac) / 100
    floor = mag.numerator // mag.denominator
    if mag - floor >= Fraction(1, 2):
        floor += 1
    return sign * 100 * int(floor)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def write_csv(report: BerReport, path) -> None:
    """Sweep CSV: EbN0_dB, then ber_/errs_ per estimator, then shared bits.

    BER values carry 12 significant digits; exact values are reconstructible
    as errs/bits from the integer columns. Two runs with the same seed
    produce byte-identical files.
    """
    if not report.roster:
        raise ValueError("empty roster")
    names = list(report.roster)
    header = "EbN0_dB," + ",".join(
        f"ber_{n},errs_{n}" for n in names) + ",bits"
    lines = [header]
    for j, ebn0 in enumerate(report.ebn0_db):
        cells = [f"{ebn0:.12g}"]
        bits = None
        for name in names:
            row = report.row(name, ebn0)
            bits = row.bits
            cells.append(f"{row.ber:.12g}")
            cells.append(str(row.errors))
        cells.append(str(bits))
        lines.append(",".join(cells))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_manifest(path, config_text: str, seed: int, checkpoints=()) -> None:
    """Machine-readable run provenance: config, seed, checkpoint hashes."""
    entry = {
        "seed": seed,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "config": config_text,
        "checkpoints": {},
    }
    for path_i in checkpoints:
        with open(path_i, "rb") as fh:
            entry["checkpoints"][str(path_i)] = hashlib.sha256(fh.read()).hexdigest()
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(entry, fh, indent=1, sort_keys=True)
        fh.write("\n")
