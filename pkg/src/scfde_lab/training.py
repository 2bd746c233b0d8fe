"""Channel-independent input normalization, the error-focused training-set
generator, and the training loop with best-snapshot early stopping.

Normalization rescales each received vector and diagonal response by
K = kappa * diag(g)^(-1/2) with kappa = sqrt(tr(g) / tr(g M M^H g)), which
makes the noise on every coordinate white with variance kappa^2 * n' *
noise_var regardless of the channel realization. Network inputs live in this
normalized domain; model-based equalizers always see raw instances (the map
is invertible whenever no diagonal entry is exactly zero, so their decisions
are unaffected either way).

The generator walks an evenly spaced grid on the *linear* SNR scale, draws a
channel per grid point, and keeps only blocks on which a baseline equalizer
makes at least ``n_errors_min`` symbol errors; channels that produce almost
no such blocks (flat channels at high SNR) are discarded and redrawn.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn, unfolded
from .channel import ChannelParams, composite_diag, sample_channel
from .equalizers import lmmse, lmmse_diag
from .numerics import Rng
from .scfde import (
    SystemModel,
    SystemSpec,
    build_system,
    component_indices,
    modulate,
    symbols_to_onehot,
    transmit_blocks,
)
from .unfolded import UnfoldedSic

__all__ = [
    "AllFadeChannelError",
    "TrainingDivergedError",
    "kappa",
    "NormalizedInstance",
    "normalize_instance",
    "GenConfig",
    "TrainingSet",
    "generate_training_set",
    "baseline_symbol_errors",
    "TrainSchedule",
    "train",
    "evaluate_records",
]

log = logging.getLogger(__name__)


class AllFadeChannelError(ValueError):
    """Every diagonal gain is zero; the instance carries no signal."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, learning_rate, epoch, batch_index):
        self.learning_rate = learning_rate
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(
            f"loss became non-finite (lr={learning_rate}, epoch={epoch}, "
            f"batch={batch_index})"
        )


def kappa(h_diag, m) -> float:
    """Normalization constant sqrt(tr(g) / tr(g M M^H g))."""
    h_diag = np.asarray(h_diag, dtype=np.float64)
    num = h_diag.sum()
    den = (h_diag**2 * (np.abs(m) ** 2).sum(axis=1)).sum()
    if num <= 0.0 or den <= 0.0:
        raise AllFadeChannelError("composite response has zero trace")
    return float(np.sqrt(num / den))


@dataclass
class NormalizedInstance:
    """K-scaled received vector(s) and diagonal, plus the raw noise level.

    Coordinates with an exactly zero gain are scaled by zero (they carry
    neither signal nor model noise); ``n_zero_gains`` records how many.
    The effective white noise variance in this domain is
    ``kappa**2 * noise_var`` per time-domain unit, i.e. the per-coordinate
    noise covariance is kappa^2 * n' * noise_var * I.
    """

    y: np.ndarray
    h_diag: np.ndarray
    kappa: float
    noise_var: float
    n_zero_gains: int = 0

    @property
    def noise_var_eff(self) -> float:
        return self.kappa**2 * self.noise_var


def normalize_instance(y, h_diag, m, noise_var) -> NormalizedInstance:
    h_diag = np.asarray(h_diag, dtype=np.float64)
    kap = kappa(h_diag, m)
    positive = h_diag > 0.0
    scale = np.where(positive, kap / np.sqrt(np.where(positive, h_diag, 1.0)), 0.0)
    y_n = np.asarray(y, dtype=np.complex128) * scale
    return NormalizedInstance(
        y=y_n,
        h_diag=scale * h_diag,
        kappa=kap,
        noise_var=float(noise_var),
        n_zero_gains=int(np.count_nonzero(~positive)),
    )


@dataclass(frozen=True)
class GenConfig:
    """Error-focused generator thresholds.

    ``n_errors_min`` is the minimum number of baseline symbol errors a block
    must show to be retained; ``n_burst`` both the burst size and the per-
    channel quota; after ``n_check`` bursts a channel keeping fewer than
    ``keep_fraction_floor * n_burst`` blocks is discarded and redrawn at the
    same SNR (at most ``max_redraws`` times, then the grid point is skipped).
    """

    n_errors_min: int
    n_burst: int
    n_check: int
    snr_range_db: tuple[float, float]
    n_channels: int
    baseline: str = "lmmse"
    keep_fraction_floor: float = 0.1
    max_redraws: int = 50

    def __post_init__(self):
        if min(self.n_errors_min, self.n_burst, self.n_check, self.n_channels) < 1:
            raise ValueError("generator counts must be positive")
        lo, hi = self.snr_range_db
        if not lo < hi:
            raise ValueError("snr_range_db must satisfy lo < hi")
        if self.baseline not in ("lmmse", "lmmse_diag"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if not 0.0 < self.keep_fraction_floor <= 1.0:
            raise ValueError("keep_fraction_floor must be in (0, 1]")


def snr_grid_linear(snr_range_db, n_points) -> np.ndarray:
    lo, hi = snr_range_db
    return np.linspace(10.0 ** (lo / 10.0), 10.0 ** (hi / 10.0), n_points)


@dataclass
class TrainingSet:
    """Retained (bits, d, y, diagonal, noise variance) records with provenance."""

    bits: np.ndarray        # (R, bits_per_block) uint8
    d: np.ndarray           # (R, n_data) complex
    y: np.ndarray           # (R, n_prime) complex
    h_diag: np.ndarray      # (R, n_prime)
    noise_var: np.ndarray   # (R,)
    channel_id: np.ndarray  # (R,) = grid_index * max_redraws + attempt
    grid_index: np.ndarray  # (R,)
    manifest: dict = field(default_factory=dict)

    @property
    def n_records(self) -> int:
        return len(self.noise_var)

    # Records file layout, per record, little-endian float64:
    #   bits_per_block values in {0.0, 1.0}
    #   n_data (re, im) pairs for d
    #   n_prime (re, im) pairs for y
    #   n_prime values for the diagonal response
    #   noise_var, channel_id, grid_index
    def save(self, directory) -> None:
        import os

        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "manifest.txt"), "w", encoding="ascii") as fh:
            for key in sorted(self.manifest):
                fh.write(f"{key} = {self.manifest[key]}\n")
            fh.write(f"layout_n_records = {self.n_records}\n")
            fh.write(f"layout_bits_per_block = {self.bits.shape[1]}\n")
            fh.write(f"layout_n_data = {self.d.shape[1]}\n")
            fh.write(f"layout_n_prime = {self.y.shape[1]}\n")
        rec = np.concatenate(
            [
                self.bits.astype(np.float64),
                self.d.view(np.float64).reshape(self.n_records, -1),
                self.y.view(np.float64).reshape(self.n_records, -1),
                self.h_diag,
                self.noise_var[:, None],
                self.channel_id[:, None].astype(np.float64),
                self.grid_index[:, None].astype(np.float64),
            ],
            axis=1,
        )
        rec.astype("<f8").tofile(os.path.join(directory, "records.bin"))

    @classmethod
    def load(cls, directory) -> "TrainingSet":
        import os

        manifest = {}
        with open(os.path.join(directory, "manifest.txt"), "r", encoding="ascii") as fh:
            for line in fh:
                key, _, value = line.partition(" = ")
                manifest[key.strip()] = value.strip()
        n_rec = int(manifest.pop("layout_n_records"))
        n_bits = int(manifest.pop("layout_bits_per_block"))
        n_data = int(manifest.pop("layout_n_data"))
        n_prime = int(manifest.pop("layout_n_prime"))
        width = n_bits + 2 * n_data + 2 * n_prime + n_prime + 3
        raw = np.fromfile(os.path.join(directory, "records.bin"), dtype="<f8")
        raw = raw.reshape(n_rec, width)
        off = 0
        bits = raw[:, off : off + n_bits].astype(np.uint8)
        off += n_bits
        d = raw[:, off : off + 2 * n_data].copy().view(np.complex128)
        off += 2 * n_data
        y = raw[:, off : off + 2 * n_prime].copy().view(np.complex128)
        off += 2 * n_prime
        h_diag = raw[:, off : off + n_prime].copy()
        off += n_prime
        noise_var = raw[:, off].copy()
        channel_id = raw[:, off + 1].astype(np.int64)
        grid_index = raw[:, off + 2].astype(np.int64)
        return cls(bits, d, y, h_diag, noise_var, channel_id, grid_index, manifest)


def _baseline_estimate(name: str, system: SystemModel, y, noise_var, sym_var):
    if name == "lmmse":
        return lmmse(system, y, noise_var, sym_var)
    return lmmse_diag(system, y, noise_var, sym_var,
                      allow_uw_approx=system.mode == "uw")


def baseline_symbol_errors(name: str, system: SystemModel, y, d, noise_var,
                           alphabet) -> np.ndarray:
    """Symbol error count per block for the named baseline equalizer."""
    d_hat = _baseline_estimate(name, system, y, noise_var, alphabet.sym_var)
    wrong = component_indices(d_hat, alphabet) != component_indices(d, alphabet)
    return wrong.any(axis=-1).sum(axis=-1)


def generate_training_set(cfg: GenConfig, spec: SystemSpec,
                          chan: ChannelParams, rng: Rng) -> TrainingSet:
    """Produce the retained-record dataset; deterministic under (cfg, seed)."""
    alphabet = spec.make_alphabet()
    n_bits = spec.bits_per_block()
    grid = snr_grid_linear(cfg.snr_range_db, cfg.n_channels)
    burst_cap = 50 * cfg.n_check  # safety net against barely-passing channels
    rows_bits, rows_d, rows_y, rows_h = [], [], [], []
    rows_nv, rows_cid, rows_gi = [], [], []
    skipped = 0
    for gi, snr_lin in enumerate(grid):
        noise_var = alphabet.sym_var / (alphabet.bits_per_symbol * snr_lin)
        success = False
        for attempt in range(cfg.max_redraws):
            taps = sample_channel(rng.substream("chan", gi, attempt), chan)
            h_diag = composite_diag(taps, spec.n_prime)
            system = build_system(spec.mode, spec.n_data, spec.n_guard, h_diag)
            kept_bits, kept_d, kept_y = [], [], []
            n_kept = 0
            burst = 0
            # Bursts are drawn and screened in chunks of n_check; the chunk
            # shares one baseline solve but per-burst sub-streams keep the
            # retained records identical to one-burst-at-a-time processing.
            while burst < burst_cap:
                chunk = min(cfg.n_check, burst_cap - burst)
                bits = np.concatenate([
                    rng.substream("bits", gi, attempt, burst + j).integers(
                        0, 2, (cfg.n_burst, n_bits)).astype(np.uint8)
                    for j in range(chunk)])
                d = modulate(bits, alphabet)
                y = np.concatenate([
                    transmit_blocks(d[j * cfg.n_burst : (j + 1) * cfg.n_burst],
                                    system, noise_var,
                                    rng.substream("noise", gi, attempt, burst + j))
                    for j in range(chunk)])
                errs = baseline_symbol_errors(cfg.baseline, system, y, d,
                                              noise_var, alphabet)
                keep = errs >= cfg.n_errors_min
                if keep.any():
                    kept_bits.append(bits[keep])
                    kept_d.append(d[keep])
                    kept_y.append(y[keep])
                    n_kept += int(keep.sum())
                burst += chunk
                if burst == cfg.n_check and n_kept < cfg.keep_fraction_floor * cfg.n_burst:
                    break  # discard this channel, redraw at the same SNR
                if n_kept >= cfg.n_burst:
                    success = True
                    break
            if success:
                bits_all = np.concatenate(kept_bits)[: cfg.n_burst]
                d_all = np.concatenate(kept_d)[: cfg.n_burst]
                y_all = np.concatenate(kept_y)[: cfg.n_burst]
                rows_bits.append(bits_all)
                rows_d.append(d_all)
                rows_y.append(y_all)
                rows_h.append(np.tile(h_diag, (cfg.n_burst, 1)))
                rows_nv.append(np.full(cfg.n_burst, noise_var))
                rows_cid.append(np.full(cfg.n_burst, gi * cfg.max_redraws + attempt,
                                        dtype=np.int64))
                rows_gi.append(np.full(cfg.n_burst, gi, dtype=np.int64))
                break
        if not success:
            skipped += 1
            log.warning("grid point %d (snr %.3f linear) skipped after %d redraws",
                        gi, snr_lin, cfg.max_redraws)
    if not rows_bits:
        raise RuntimeError("no grid point produced any retained records")
    manifest = {
        "mode": spec.mode, "n_data": spec.n_data, "n_guard": spec.n_guard,
        "alphabet": alphabet.name,
        "tau_rms": chan.tau_rms, "t_s": chan.t_s, "n_taps": chan.n_taps,
        "n_errors_min": cfg.n_errors_min, "n_burst": cfg.n_burst,
        "n_check": cfg.n_check, "snr_lo_db": cfg.snr_range_db[0],
        "snr_hi_db": cfg.snr_range_db[1], "n_channels": cfg.n_channels,
        "baseline": cfg.baseline, "keep_fraction_floor": cfg.keep_fraction_floor,
        "max_redraws": cfg.max_redraws, "seed": rng.seed,
        "skipped_grid_points": skipped,
    }
    return TrainingSet(
        bits=np.concatenate(rows_bits),
        d=np.concatenate(rows_d),
        y=np.concatenate(rows_y),
        h_diag=np.concatenate(rows_h),
        noise_var=np.concatenate(rows_nv),
        channel_id=np.concatenate(rows_cid),
        grid_index=np.concatenate(rows_gi),
        manifest=manifest,
    )


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int
    batch_size: int = 256
    learning_rate: float = 6e-4
    loss_exponent: int = 1
    seed: int = 0


def _normalized_arrays(ts: TrainingSet, m):
    """Pre-normalize every record once; returns (y_n, h_n, nv_eff)."""
    r = ts.n_records
    y_n = np.empty_like(ts.y)
    h_n = np.empty_like(ts.h_diag)
    nv_eff = np.empty(r)
    for i in range(r):
        inst = normalize_instance(ts.y[i], ts.h_diag[i], m, ts.noise_var[i])
        y_n[i] = inst.y
        h_n[i] = inst.h_diag
        nv_eff[i] = inst.noise_var_eff
    return y_n, h_n, nv_eff


def evaluate_records(model: UnfoldedSic, y_n, h_n, nv_eff, bits, m,
                     batch: int = 2048) -> float:
    """Bit error ratio of the final-stage hard decisions over stored records."""
    errors = 0
    total = bits.size
    for lo in range(0, len(nv_eff), batch):
        sl = slice(lo, min(lo + batch, len(nv_eff)))
        h = h_n[sl][:, :, None] * m[None]
        stages, _ = unfolded.forward(model, y_n[sl], h, h_n[sl], nv_eff[sl], m)
        dec = unfolded.hard_bits(stages[-1], model.alphabet)
        errors += int((dec != bits[sl]).sum())
    return errors / total


def _adam_states(model: UnfoldedSic):
    if model.variant == "v1":
        return [(nn.AdamState(), nn.AdamState()) for _ in model.nets]
    return [nn.AdamState() for _ in model.nets]


def train(model: UnfoldedSic, train_set: TrainingSet, val_set: TrainingSet,
          schedule: TrainSchedule, spec: SystemSpec):
    """Minibatch training with per-epoch validation-BER snapshot selection.

    Returns (best model copy, history) where history rows are
    (epoch, mean train loss, validation BER). A zero-epoch schedule returns
    the initialized model unchanged.
    """
    system = build_system(spec.mode, spec.n_data, spec.n_guard,
                          np.ones(spec.n_prime))
    m = system.m
    if schedule.epochs == 0:
        return model.copy(), []
    y_tr, h_tr, nv_tr = _normalized_arrays(train_set, m)
    targets = symbols_to_onehot(train_set.d, model.alphabet)
    y_va, h_va, nv_va = _normalized_arrays(val_set, m)
    spec_loss = nn.LossSpec(model.n_stages, schedule.loss_exponent)
    states = _adam_states(model)
    rng = Rng(schedule.seed)
    history = []
    best = model.copy()
    best_ber = np.inf
    n_rec = train_set.n_records
    for epoch in range(1, schedule.epochs + 1):
        perm = rng.substream("shuffle", epoch).permutation(n_rec)
        losses = []
        for bi, lo in enumerate(range(0, n_rec, schedule.batch_size)):
            rows = perm[lo : lo + schedule.batch_size]
            h = h_tr[rows][:, :, None] * m[None]
            stages, caches = unfolded.forward(
                model, y_tr[rows], h, h_tr[rows], nv_tr[rows], m,
                train=True, want_cache=True)
            loss, gstages = nn.weighted_ce_loss(
                [st.p for st in stages], targets[rows], spec_loss)
            if not np.isfinite(loss):
                raise TrainingDivergedError(schedule.learning_rate, epoch, bi)
            grads = unfolded.backward(model, caches, gstages, y_tr[rows], h,
                                      h_tr[rows], nv_tr[rows], m)
            for slot, g in enumerate(grads):
                if model.variant == "v1":
                    nn.adam_step(model.nets[slot][0], g[0], states[slot][0],
                                 schedule.learning_rate)
                    nn.adam_step(model.nets[slot][1], g[1], states[slot][1],
                                 schedule.learning_rate)
                else:
                    nn.adam_step(model.nets[slot], g, states[slot],
                                 schedule.learning_rate)
            losses.append(loss)
        val_ber = evaluate_records(model, y_va, h_va, nv_va, val_set.bits, m)
        history.append((epoch, float(np.mean(losses)), val_ber))
        if val_ber < best_ber:
            best_ber = val_ber
            best = model.copy()
    return best, history
