"""Model-based estimators: LMMSE (general and single-tap forms), decision
feedback, and iterative soft interference cancellation (SIC).

The iterative SIC estimator refines per-symbol posterior means: in every
iteration each symbol is estimated on its own after cancelling the current
soft estimates of all other symbols, with the residual interference-plus-noise
treated as Gaussian. All likelihood work is done in the log domain with max
subtraction, and covariances get a small diagonal loading; both guard against
the near-singular covariances that deep fades and high SNR produce.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    NotPositiveDefiniteError,
    cholesky_factor,
    cholesky_solve,
    _solve_lower,
    _solve_upper_from_lower,
)
from .scfde import Alphabet, SystemModel, component_indices

__all__ = [
    "SoftState",
    "SicConfig",
    "CovarianceConditionError",
    "lmmse",
    "lmmse_diag",
    "dfe",
    "sic_ic_step",
    "sic_cvv",
    "sic_posterior",
    "iterative_sic",
]

DEFAULT_JITTER = 1e-10


class CovarianceConditionError(NotPositiveDefiniteError):
    """Total-noise covariance stayed indefinite despite diagonal loading."""


@dataclass
class SoftState:
    """Per-symbol soft information from one SIC iteration.

    ``pmf`` rows are posterior probabilities over the full symbol set,
    ``d_hat`` the posterior means, ``e`` the conditional mean square errors.
    Leading dimensions are batch dimensions.
    """

    pmf: np.ndarray | None
    d_hat: np.ndarray
    e: np.ndarray

    def component_pmfs(self, alphabet: Alphabet) -> np.ndarray:
        """Marginal per-component PMFs of shape (..., n_data, 2, n_levels)."""
        n = alphabet.n_levels
        p = self.pmf.reshape(self.pmf.shape[:-1] + (n, n))
        return np.stack([p.sum(axis=-1), p.sum(axis=-2)], axis=-2)


@dataclass(frozen=True)
class SicConfig:
    n_iter: int = 1
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


def _normal_matrix(model: SystemModel, noise_var: float, sym_var: float) -> np.ndarray:
    g = model.m.conj().T @ model.h
    return g + (model.n_prime * noise_var / sym_var) * np.eye(model.n_data)


def lmmse(model: SystemModel, y, noise_var: float, sym_var: float = 1.0) -> np.ndarray:
    """Linear MMSE estimate solving the normal equations by Cholesky.

    d_hat = (M^H diag(g) M + n' * noise_var / sym_var * I)^{-1} M^H y.
    ``y`` may carry leading batch dimensions. Raises a typed error if the
    normal matrix is singular (possible only at noise_var = 0 with a
    rank-deficient channel).
    """
    y = np.asarray(y, dtype=np.complex128)
    a = _normal_matrix(model, noise_var, sym_var)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    rhs = y2 @ np.conj(model.m)
    d = cholesky_solve(a, rhs.T).T
    return d[0] if single else d


def lmmse_diag(model: SystemModel, y, noise_var: float, sym_var: float = 1.0,
               allow_uw_approx: bool = False) -> np.ndarray:
    """Single-tap LMMSE: d_hat = (1/n') M^H diag(g + noise_var/sym_var)^{-1} y.

    Exact in CP mode (circulant channel). In UW mode it is the approximate
    low-complexity variant that estimates the guard sequence alongside the
    data instead of removing it; set ``allow_uw_approx=True`` to opt in.
    """
    y = np.asarray(y, dtype=np.complex128)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    scale = 1.0 / (model.h_diag + noise_var / sym_var)
    if model.mode == "cp":
        d = (y2 * scale) @ np.conj(model.m) / model.n_prime
    else:
        if not allow_uw_approx:
            raise ValueError(
                "lmmse_diag is exact only in CP mode; pass allow_uw_approx=True "
                "to use the approximate UW-mode variant"
            )
        x = (y2 * scale) @ np.conj(model.f_full) / model.n_prime
        d = x[:, : model.n_data]
    return d[0] if single else d


def _nearest_symbol(d_hat, alphabet: Alphabet) -> np.ndarray:
    idx = component_indices(d_hat, alphabet)
    comp = alphabet.levels[idx]
    return comp[..., 0] + 1j * comp[..., 1]


def dfe(model: SystemModel, y, noise_var: float, sym_var: float,
        alphabet: Alphabet) -> np.ndarray:
    """Decision feedback equalizer; returns hard symbol decisions.

    Each round runs LMMSE on the undecided symbols, slices the one with the
    smallest error variance, cancels it from the received vector, and drops
    its column. The normal-equation solve is redone per round; at block
    lengths <= 32 that is cheap and keeps the code obvious.
    """
    y = np.asarray(y, dtype=np.complex128)
    if y.ndim > 1:
        return np.stack([dfe(model, row, noise_var, sym_var, alphabet) for row in y])
    g = model.m.conj().T @ model.h
    lam = model.n_prime * noise_var / sym_var
    active = np.arange(model.n_data)
    y_work = y.copy()
    out = np.empty(model.n_data, dtype=np.complex128)
    while active.size:
        na = active.size
        a = g[np.ix_(active, active)] + lam * np.eye(na)
        rhs = np.concatenate(
            [(y_work @ np.conj(model.m[:, active]))[:, None], np.eye(na)], axis=1
        )
        sol = cholesky_solve(a, rhs)
        d_hat = sol[:, 0]
        err_var = np.diagonal(sol[:, 1:]).real  # error covariance up to a positive factor
        j = int(np.argmin(err_var))
        k = int(active[j])
        sym = _nearest_symbol(d_hat[j], alphabet)
        out[k] = sym
        y_work = y_work - model.h[:, k] * sym
        active = np.delete(active, j)
    return out


def sic_ic_step(model: SystemModel, y, d_hat_all, k: int) -> np.ndarray:
    """Cancel every soft estimate except symbol k from the received vector."""
    d_hat_all = np.asarray(d_hat_all, dtype=np.complex128)
    if len(d_hat_all) != model.n_data:
        raise ValueError("d_hat_all must have one entry per data symbol")
    return y - model.h @ d_hat_all + model.h[:, k] * d_hat_all[k]


def sic_cvv(model: SystemModel, state_prev: SoftState | None, k: int,
            noise_var: float, first_iteration: bool = False,
            sym_var: float = 1.0, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Total-noise covariance for estimating symbol k.

    First iteration: C = sym_var * H_k H_k^H + n' * noise_var * diag(g) with
    H_k the channel matrix without column k (the data act as interference at
    full symbol variance). Later iterations replace sym_var by the per-symbol
    conditional MSEs of the previous soft state; cross-correlations between
    estimation errors, and between errors and the channel noise, have no
    closed form and are dropped. A diagonal loading of
    jitter * trace(C) / n' keeps deep-fade covariances factorizable.
    """
    idx = np.arange(model.n_data) != k
    hbar = model.h[:, idx]
    if first_iteration:
        e = np.full(model.n_data - 1, sym_var)
    else:
        if state_prev is None:
            raise ValueError("state_prev required when first_iteration is False")
        e = np.asarray(state_prev.e, dtype=np.float64)[idx]
    c = (hbar * e) @ hbar.conj().T
    c += model.n_prime * noise_var * np.diag(model.h_diag)
    load = jitter * np.trace(c).real / model.n_prime
    c += load * np.eye(model.n_prime)
    return c


def sic_posterior(model: SystemModel, y_ic, c_vv, k: int, alphabet: Alphabet):
    """Posterior PMF over the symbol set plus its mean and conditional MSE.

    The per-symbol log-likelihood is 2 Re{s* h_k^H C^{-1} y_ic} - |s|^2 h_k^H
    C^{-1} h_k, accumulated in the log domain and normalized after max
    subtraction (uniform prior).
    """
    h_k = model.h[:, k]
    try:
        sol = cholesky_solve(c_vv, np.stack([h_k, np.asarray(y_ic)], axis=1))
    except NotPositiveDefiniteError as exc:
        raise CovarianceConditionError(exc.pivot_index, exc.pivot_value) from exc
    quad = np.vdot(h_k, sol[:, 0]).real
    cross = np.vdot(h_k, sol[:, 1])
    s = alphabet.symbols
    logf = 2.0 * (np.conj(s) * cross).real - np.abs(s) ** 2 * quad
    logf -= logf.max()
    pmf = np.exp(logf)
    pmf /= pmf.sum()
    d_hat = pmf @ s
    e = float(np.maximum(pmf @ np.abs(s) ** 2 - np.abs(d_hat) ** 2, 0.0))
    return pmf, d_hat, e


def _cvv_stack(h, h_diag, e, noise_var, n_prime, jitter):
    """Leave-one-out covariances for all (block, k) at once.

    h: (B, n', K), e: (B, K). Builds T = sum_i e_i h_i h_i^H once per block
    and subtracts the rank-one k-th term.
    """
    t = np.einsum("bni,bi,bmi->bnm", h, e, h.conj())
    hk = np.swapaxes(h, 1, 2)  # (B, K, n')
    c = t[:, None, :, :] - e[:, :, None, None] * (
        hk[:, :, :, None] * hk.conj()[:, :, None, :]
    )
    ii = np.arange(n_prime)
    c[..., ii, ii] += n_prime * noise_var * h_diag
    trace = c[..., ii, ii].real.sum(axis=-1)
    c[..., ii, ii] += (jitter / n_prime) * trace[..., None]
    return c


def _posterior_stack(c, h, y_ic, alphabet: Alphabet):
    """Vectorized posterior update. c: (B,K,n',n'), h: (B,n',K), y_ic: (B,K,n')."""
    hk = np.swapaxes(h, 1, 2)
    rhs = np.stack([hk, y_ic], axis=-1)  # (B, K, n', 2)
    try:
        low = cholesky_factor(c)
    except NotPositiveDefiniteError as exc:
        raise CovarianceConditionError(exc.pivot_index, exc.pivot_value) from exc
    sol = _solve_upper_from_lower(low, _solve_lower(low, rhs))
    quad = np.einsum("bkn,bkn->bk", hk.conj(), sol[..., 0]).real
    cross = np.einsum("bkn,bkn->bk", hk.conj(), sol[..., 1])
    s = alphabet.symbols
    logf = 2.0 * (np.conj(s)[None, None, :] * cross[..., None]).real \
        - np.abs(s)[None, None, :] ** 2 * quad[..., None]
    logf -= logf.max(axis=-1, keepdims=True)
    pmf = np.exp(logf)
    pmf /= pmf.sum(axis=-1, keepdims=True)
    d_hat = pmf @ s
    e = np.maximum(pmf @ np.abs(s) ** 2 - np.abs(d_hat) ** 2, 0.0)
    return pmf, d_hat, e


def iterative_sic(model: SystemModel, y, noise_var: float, sym_var: float,
                  cfg: SicConfig, alphabet: Alphabet):
    """Iterative soft interference cancellation equalizer.

    Soft estimates start at the prior mean (zero vector) with MSE sym_var;
    each iteration cancels all-but-one soft estimates per symbol, refreshes
    the leave-one-out noise covariance, and recomputes the per-symbol
    posterior. All symbols update jointly from the previous iteration's state.

    Returns (hard symbol decisions, final SoftState); batch leading dimension
    on ``y`` is supported.
    """
    y = np.asarray(y, dtype=np.complex128)
    single = y.ndim == 1
    yb = np.atleast_2d(y)
    n_blocks, n_prime = yb.shape
    k = model.n_data
    d_hat = np.zeros((n_blocks, k), dtype=np.complex128)
    e = np.full((n_blocks, k), float(sym_var))
    pmf = None
    noise_c = model.n_prime * noise_var * model.h_diag

    # First iteration: the covariances do not depend on the block, so factor
    # once per channel and turn the posterior into two inner products.
    h = model.h
    idx_all = np.arange(k)
    c0 = np.empty((k, n_prime, n_prime), dtype=np.complex128)
    for j in range(k):
        hbar = h[:, idx_all != j]
        c = sym_var * (hbar @ hbar.conj().T)
        c += np.diag(noise_c)
        load = cfg.jitter * np.trace(c).real / n_prime
        c += load * np.eye(n_prime)
        c0[j] = c
    try:
        low0 = cholesky_factor(c0)
    except NotPositiveDefiniteError as exc:
        raise CovarianceConditionError(exc.pivot_index, exc.pivot_value) from exc
    rhs0 = np.concatenate([np.swapaxes(h, 0, 1)[:, :, None],
                           np.broadcast_to(yb.T[None], (k, n_prime, n_blocks))], axis=2)
    sol0 = _solve_upper_from_lower(low0, _solve_lower(low0, rhs0))
    quad0 = np.einsum("kn,kn->k", h.T.conj(), sol0[:, :, 0]).real
    cross0 = np.einsum("kn,knb->bk", h.T.conj(), sol0[:, :, 1:])
    s = alphabet.symbols
    logf = 2.0 * (np.conj(s)[None, None, :] * cross0[..., None]).real \
        - np.abs(s)[None, None, :] ** 2 * quad0[None, :, None]
    logf -= logf.max(axis=-1, keepdims=True)
    pmf = np.exp(logf)
    pmf /= pmf.sum(axis=-1, keepdims=True)
    d_hat = pmf @ s
    e = np.maximum(pmf @ np.abs(s) ** 2 - np.abs(d_hat) ** 2, 0.0)

    if cfg.n_iter > 1:
        hb = np.broadcast_to(h[None], (n_blocks,) + h.shape)
        chunk = max(1, 4_000_000 // (k * n_prime * n_prime))
        for _ in range(1, cfg.n_iter):
            new_pmf = np.empty_like(pmf)
            new_d = np.empty_like(d_hat)
            new_e = np.empty_like(e)
            for lo in range(0, n_blocks, chunk):
                sl = slice(lo, min(lo + chunk, n_blocks))
                yc, dc, ec = yb[sl], d_hat[sl], e[sl]
                y_ic = yc[:, None, :] - (dc @ h.T)[:, None, :] \
                    + np.swapaxes(h, 0, 1)[None] * dc[:, :, None]
                c = _cvv_stack(hb[sl], model.h_diag, ec, noise_var,
                               n_prime, cfg.jitter)
                new_pmf[sl], new_d[sl], new_e[sl] = _posterior_stack(
                    c, hb[sl], y_ic, alphabet)
            pmf, d_hat, e = new_pmf, new_d, new_e

    hard = _nearest_symbol(d_hat, alphabet)
    state = SoftState(pmf=pmf, d_hat=d_hat, e=e)
    if single:
        return hard[0], SoftState(pmf=pmf[0], d_hat=d_hat[0], e=e[0])
    return hard, state
