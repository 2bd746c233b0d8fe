"""Deep-unfolded soft-interference-cancellation equalizers.

A fixed number of stages refines per-symbol component PMFs. Every stage first
turns the previous PMFs into soft symbol estimates and per-component MSEs,
cancels all-but-one soft estimates from the received vector, and then replaces
the numerically fragile covariance / posterior computations of the model-based
method with small dense sub-networks:

* variant ``v1`` (SC-FDE tailored): one sub-network maps the noise level, the
  diagonal channel response and the first row of the structural error-term
  Toeplitz matrix to the diagonal of the precision matrix (outputs squared to
  keep it nonnegative); a second tiny sub-network maps the three scalar
  sufficient statistics of the per-symbol Gaussian likelihood to fresh PMFs.
* variant ``v2`` (system agnostic): a single sub-network consumes the scaled
  cancelled vector, channel column, reliabilities and noise level directly.

``shared=True`` reuses one parameter set across all stages (parameter-reduced
variants). Training backpropagates through the entire unrolled computation,
soft statistics and cancellation included; ``detach_stages`` cuts the
inter-stage gradient for ablation. All inputs are expected in the
channel-normalized domain produced by the training module.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .numerics import Rng
from .scfde import Alphabet, SystemModel, make_alphabet

__all__ = [
    "StageIO",
    "UnfoldedSic",
    "build_v1",
    "build_v2",
    "build_unfolded",
    "uniform_pmfs",
    "soft_stats",
    "build_a_k",
    "v1_stage",
    "v2_stage",
    "forward",
    "backward",
    "hard_bits",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class StageIO:
    """Output of one stage: component PMFs plus the soft stats they imply."""

    p: np.ndarray       # (B, K, 2, L)
    d_hat: np.ndarray   # (B, K) complex
    e_re: np.ndarray    # (B, K)
    e_im: np.ndarray
    e: np.ndarray


@dataclass
class UnfoldedSic:
    variant: str                 # "v1" | "v2"
    shared: bool
    n_stages: int
    alphabet: Alphabet
    n_data: int
    n_prime: int
    widths: dict
    nets: list                   # v1: [(prec_net, prob_net), ...]; v2: [net, ...]
    detach_stages: bool = False
    meta: dict = field(default_factory=dict)  # mode / n_guard for checkpoints

    def stage_nets(self, q: int):
        return self.nets[0 if self.shared else q]

    def trainable_nets(self):
        if self.variant == "v1":
            for pair in self.nets:
                yield from pair
        else:
            yield from self.nets

    def copy(self) -> "UnfoldedSic":
        if self.variant == "v1":
            nets = [(a.copy(), b.copy()) for a, b in self.nets]
        else:
            nets = [a.copy() for a in self.nets]
        return UnfoldedSic(self.variant, self.shared, self.n_stages, self.alphabet,
                           self.n_data, self.n_prime, dict(self.widths), nets,
                           self.detach_stages, dict(self.meta))


def _feedforward(n_in, n_hidden, n_layers, n_out, rng, softmax_sizes=None,
                 bn_every_third=False):
    layers = [nn.BatchNorm(n_in)]
    dim = n_in
    for i in range(1, n_layers + 1):
        layers.append(nn.Affine.init(dim, n_hidden, rng.substream("affine", i)))
        layers.append(nn.Relu())
        dim = n_hidden
        if bn_every_third and i % 3 == 0:
            layers.append(nn.BatchNorm(n_hidden))
    layers.append(nn.Affine.init(dim, n_out, rng.substream("affine", 0)))
    if softmax_sizes is not None:
        layers.append(nn.SoftmaxSplit(softmax_sizes))
    return nn.Network(layers)


def build_v1(alphabet: Alphabet, n_data: int, n_prime: int, n_stages: int,
             rng: Rng, shared: bool = False, n_layers_prec: int = 3,
             n_hidden_prec: int = 70, n_layers_prob: int = 2,
             n_hidden_prob: int = 10) -> UnfoldedSic:
    widths = {"n_layers_prec": n_layers_prec, "n_hidden_prec": n_hidden_prec,
              "n_layers_prob": n_layers_prob, "n_hidden_prob": n_hidden_prob}
    n_sets = 1 if shared else n_stages
    lv = alphabet.n_levels
    nets = []
    for q in range(n_sets):
        r = rng.substream("stage", q)
        prec = _feedforward(3 * n_prime + 1, n_hidden_prec, n_layers_prec,
                            n_prime, r.substream("prec"))
        prob = _feedforward(3, n_hidden_prob, n_layers_prob, 2 * lv,
                            r.substream("prob"), softmax_sizes=(lv, lv))
        nets.append((prec, prob))
    return UnfoldedSic("v1", shared, n_stages, alphabet, n_data, n_prime,
                       widths, nets)


def build_v2(alphabet: Alphabet, n_data: int, n_prime: int, n_stages: int,
             rng: Rng, shared: bool = False, n_layers: int = 4,
             n_hidden: int = 200) -> UnfoldedSic:
    widths = {"n_layers": n_layers, "n_hidden": n_hidden}
    n_sets = 1 if shared else n_stages
    lv = alphabet.n_levels
    nets = []
    for q in range(n_sets):
        r = rng.substream("stage", q)
        net = _feedforward(4 * n_prime + 3, n_hidden, n_layers, 2 * lv,
                           r, softmax_sizes=(lv, lv), bn_every_third=True)
        nets.append(net)
    return UnfoldedSic("v2", shared, n_stages, alphabet, n_data, n_prime,
                       widths, nets)


def build_unfolded(variant: str, alphabet: Alphabet, n_data: int, n_prime: int,
                   n_stages: int, rng: Rng, shared: bool = False,
                   **widths) -> UnfoldedSic:
    if variant == "v1":
        return build_v1(alphabet, n_data, n_prime, n_stages, rng, shared, **widths)
    if variant == "v2":
        return build_v2(alphabet, n_data, n_prime, n_stages, rng, shared, **widths)
    raise ValueError(f"unknown variant {variant!r}")


def uniform_pmfs(n_blocks: int, n_data: int, alphabet: Alphabet) -> np.ndarray:
    """Stage-zero input: uniform component PMFs (the prior distribution)."""
    lv = alphabet.n_levels
    return np.full((n_blocks, n_data, 2, lv), 1.0 / lv)


def _soft_stats_batch(p, alphabet: Alphabet):
    s = alphabet.levels
    d_re = p[..., 0, :] @ s
    d_im = p[..., 1, :] @ s
    e_re = ((s - d_re[..., None]) ** 2 * p[..., 0, :]).sum(-1)
    e_im = ((s - d_im[..., None]) ** 2 * p[..., 1, :]).sum(-1)
    e = np.hypot(e_re, e_im)
    return d_re, d_im, e_re, e_im, e


def soft_stats(p_k, alphabet: Alphabet):
    """Posterior mean and MSEs of one symbol's component PMFs (2, L).

    Returns (d_hat complex, e_re, e_im, e) with e = sqrt(e_re^2 + e_im^2).
    """
    p = np.asarray(p_k, dtype=np.float64)[None, None]
    d_re, d_im, e_re, e_im, e = _soft_stats_batch(p, alphabet)
    return complex(d_re[0, 0] + 1j * d_im[0, 0]), float(e_re[0, 0]), \
        float(e_im[0, 0]), float(e[0, 0])


def build_a_k(e_all, k: int, m) -> np.ndarray:
    """Row summary of the structural error covariance: a_k = sum_{i!=k} e_i m_i.

    Because every column of ``m`` starts with a 1, component 0 equals
    sum_{i!=k} e_i.
    """
    e_all = np.asarray(e_all, dtype=np.float64)
    return m @ e_all - e_all[k] * m[:, k]


def _as_batched(y, h, h_diag, noise_var):
    y = np.atleast_2d(np.asarray(y, dtype=np.complex128))
    b = y.shape[0]
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim == 2:
        h = np.broadcast_to(h[None], (b,) + h.shape)
    h_diag = np.asarray(h_diag, dtype=np.float64)
    if h_diag.ndim == 1:
        h_diag = np.broadcast_to(h_diag[None], (b, h_diag.shape[0]))
    noise_var = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (b,))
    return y, h, h_diag, noise_var


def _stage_forward(model: UnfoldedSic, q: int, p_in, y, h, hk, h_diag,
                   noise_var, m, train: bool, want_cache: bool):
    """One stage on batched inputs. h is (B,N,K), hk its (B,K,N) transpose."""
    alphabet = model.alphabet
    b, k_sym = p_in.shape[:2]
    n = y.shape[1]
    d_re, d_im, e_re, e_im, e = _soft_stats_batch(p_in, alphabet)
    d = d_re + 1j * d_im

    t = np.einsum("bnk,bk->bn", h, d)
    y_ic = y[:, None, :] - t[:, None, :] + hk * d[:, :, None]
    nrm = np.linalg.norm(y_ic, axis=-1)
    zero = nrm == 0.0
    nrm_safe = np.where(zero, 1.0, nrm)

    if model.variant == "v1":
        prec_net, prob_net = model.stage_nets(q)
        me = np.einsum("nk,bk->bn", m, e)
        a = me[:, None, :] - e[:, :, None] * m.T[None, :, :]
        g = np.concatenate([
            np.broadcast_to(noise_var[:, None, None], (b, k_sym, 1)),
            np.broadcast_to(h_diag[:, None, :], (b, k_sym, n)),
            a.real, a.imag,
        ], axis=-1)
        o_flat, prec_cache = nn.forward(prec_net, g.reshape(b * k_sym, -1), train)
        o = o_flat.reshape(b, k_sym, n)
        c = o**2
        u = hk.real * y_ic.real + hk.imag * y_ic.imag   # Re{conj(h) y_ic}
        v = hk.real * y_ic.imag - hk.imag * y_ic.real   # Im{conj(h) y_ic}
        wsq = np.abs(hk) ** 2
        a1 = (c * u).sum(-1)
        a2 = (c * v).sum(-1)
        a3 = (c * wsq).sum(-1)
        rho2 = 1.0 / nrm_safe   # both vectors scaled by ||y_ic||^(-1/2)
        s_in = np.stack([rho2 * a1, rho2 * a2, rho2 * a3], axis=-1)
        p_flat, prob_cache = nn.forward(prob_net, s_in.reshape(b * k_sym, 3), train)
        cache = None
        if want_cache:
            cache = {"p_in": p_in, "d_re": d_re, "d_im": d_im,
                     "e_re": e_re, "e_im": e_im, "e": e,
                     "y_ic": y_ic, "nrm": nrm_safe, "zero": zero,
                     "o": o, "c": c, "u": u, "v": v, "wsq": wsq,
                     "a1": a1, "a2": a2, "a3": a3, "rho2": rho2,
                     "prec_cache": prec_cache, "prob_cache": prob_cache}
    else:
        net = model.stage_nets(q)
        rho = nrm_safe**-0.5
        z = np.concatenate([
            rho[:, :, None] * y_ic.real, rho[:, :, None] * y_ic.imag,
            rho[:, :, None] * hk.real, rho[:, :, None] * hk.imag,
            e_re[:, :, None], e_im[:, :, None],
            (rho**2 * noise_var[:, None])[:, :, None],
        ], axis=-1)
        p_flat, net_cache = nn.forward(net, z.reshape(b * k_sym, -1), train)
        cache = None
        if want_cache:
            cache = {"p_in": p_in, "d_re": d_re, "d_im": d_im,
                     "e_re": e_re, "e_im": e_im, "e": e,
                     "y_ic": y_ic, "nrm": nrm_safe, "zero": zero, "rho": rho,
                     "net_cache": net_cache}
    p_out = p_flat.reshape(b, k_sym, 2, alphabet.n_levels)
    return p_out, cache


def _stage_io(p, alphabet: Alphabet) -> StageIO:
    d_re, d_im, e_re, e_im, e = _soft_stats_batch(p, alphabet)
    return StageIO(p=p, d_hat=d_re + 1j * d_im, e_re=e_re, e_im=e_im, e=e)


def forward(model: UnfoldedSic, y, h, h_diag, noise_var, m,
            train: bool = False, want_cache: bool = False):
    """Run all stages; returns (list of StageIO, caches or None).

    ``y`` (B, n'), ``h`` (n', K) or (B, n', K), ``h_diag`` (n',) or (B, n'),
    ``noise_var`` scalar or (B,), ``m`` the DFT-column matrix (n', K).
    Training needs every stage output; inference reads the final one.
    """
    y, h, h_diag, noise_var = _as_batched(y, h, h_diag, noise_var)
    hk = np.swapaxes(h, 1, 2)
    p = uniform_pmfs(y.shape[0], model.n_data, model.alphabet)
    stages, caches = [], []
    for q in range(model.n_stages):
        p, cache = _stage_forward(model, q, p, y, h, hk, h_diag, noise_var,
                                  m, train, want_cache)
        stages.append(_stage_io(p, model.alphabet))
        caches.append(cache)
    return stages, (caches if want_cache else None)


def _stage_backward(model: UnfoldedSic, q: int, cache, gp_out, h, hk, m):
    """Gradients of one stage: returns (net grads for this stage, gp_in)."""
    alphabet = model.alphabet
    b, k_sym = cache["p_in"].shape[:2]
    nrm = cache["nrm"]
    zero = cache["zero"]
    y_ic = cache["y_ic"]
    gflat = gp_out.reshape(b * k_sym, -1)

    if model.variant == "v1":
        prec_net, prob_net = model.stage_nets(q)
        prob_grads, gs = nn.backward(prob_net, cache["prob_cache"], gflat)
        gs = gs.reshape(b, k_sym, 3)
        rho2 = cache["rho2"]
        ga1, ga2, ga3 = (gs[..., i] * rho2 for i in range(3))
        grho2 = gs[..., 0] * cache["a1"] + gs[..., 1] * cache["a2"] \
            + gs[..., 2] * cache["a3"]
        c = cache["c"]
        gc = ga1[..., None] * cache["u"] + ga2[..., None] * cache["v"] \
            + ga3[..., None] * cache["wsq"]
        go = (2.0 * cache["o"] * gc).reshape(b * k_sym, -1)
        prec_grads, gg = nn.backward(prec_net, cache["prec_cache"], go)
        gg = gg.reshape(b, k_sym, -1)
        n = y_ic.shape[-1]
        ga_c = gg[..., 1 + n : 1 + 2 * n] + 1j * gg[..., 1 + 2 * n :]
        s_sum = ga_c.sum(axis=1)
        ge = np.einsum("bn,nk->bk", s_sum.conj(), m).real \
            - np.einsum("bkn,nk->bk", ga_c.conj(), m).real
        gu = ga1[..., None] * c
        gv = ga2[..., None] * c
        gy_re = gu * hk.real - gv * hk.imag
        gy_im = gu * hk.imag + gv * hk.real
        gnrm = np.where(zero, 0.0, -grho2 / nrm**2)
        gy_re += (gnrm / nrm)[..., None] * y_ic.real
        gy_im += (gnrm / nrm)[..., None] * y_ic.imag
        e = cache["e"]
        safe_e = np.where(e == 0.0, 1.0, e)
        ge_re = np.where(e == 0.0, 0.0, ge * cache["e_re"] / safe_e)
        ge_im = np.where(e == 0.0, 0.0, ge * cache["e_im"] / safe_e)
        net_grads = (prec_grads, prob_grads)
    else:
        net = model.stage_nets(q)
        net_only_grads, gz = nn.backward(net, cache["net_cache"], gflat)
        n = y_ic.shape[-1]
        gz = gz.reshape(b, k_sym, -1)
        gzyre, gzyim = gz[..., :n], gz[..., n : 2 * n]
        gzhre, gzhim = gz[..., 2 * n : 3 * n], gz[..., 3 * n : 4 * n]
        ge_re = gz[..., 4 * n]
        ge_im = gz[..., 4 * n + 1]
        gsn = gz[..., 4 * n + 2]
        rho = cache["rho"]
        grho = (gzyre * y_ic.real + gzyim * y_ic.imag
                + gzhre * hk.real + gzhim * hk.imag).sum(-1)
        grho += gsn * 2.0 * rho * cache["noise_var"][:, None]
        gy_re = rho[..., None] * gzyre
        gy_im = rho[..., None] * gzyim
        gnrm = np.where(zero, 0.0, grho * (-0.5) * nrm**-1.5)
        gy_re += (gnrm / nrm)[..., None] * y_ic.real
        gy_im += (gnrm / nrm)[..., None] * y_ic.imag
        net_grads = (net_only_grads,)

    gy_c = gy_re + 1j * gy_im
    w_sum = gy_c.sum(axis=1)
    z = np.einsum("bkn,bnk->bk", (w_sum[:, None, :] - gy_c).conj(), h)
    gd_re = -z.real
    gd_im = z.imag

    s = alphabet.levels
    p_in = cache["p_in"]
    d_re, d_im = cache["d_re"], cache["d_im"]
    psum_re = p_in[..., 0, :].sum(-1)
    psum_im = p_in[..., 1, :].sum(-1)
    dev_re = (s - d_re[..., None]) ** 2 \
        - 2.0 * s * (d_re - d_re * psum_re)[..., None]
    dev_im = (s - d_im[..., None]) ** 2 \
        - 2.0 * s * (d_im - d_im * psum_im)[..., None]
    gp_in = np.empty_like(p_in)
    gp_in[..., 0, :] = gd_re[..., None] * s + ge_re[..., None] * dev_re
    gp_in[..., 1, :] = gd_im[..., None] * s + ge_im[..., None] * dev_im
    return net_grads, gp_in


def backward(model: UnfoldedSic, caches, stage_grads, y, h, h_diag, noise_var, m):
    """Backpropagate stage-output gradients to every sub-network parameter.

    ``stage_grads`` is the list produced by the loss (one (B,K,2,L) array per
    stage). Returns gradients structured like ``model.nets``.
    """
    y, h, h_diag, noise_var = _as_batched(y, h, h_diag, noise_var)
    hk = np.swapaxes(h, 1, 2)
    if model.variant == "v1":
        totals = [(nn.zero_grads(a), nn.zero_grads(bnet)) for a, bnet in model.nets]
    else:
        totals = [nn.zero_grads(a) for a in model.nets]
    gp_next = None
    for q in range(model.n_stages - 1, -1, -1):
        cache = caches[q]
        cache["noise_var"] = noise_var
        gp_total = np.array(stage_grads[q], dtype=np.float64)
        if gp_next is not None:
            gp_total = gp_total + gp_next
        net_grads, gp_in = _stage_backward(model, q, cache, gp_total, h, hk, m)
        slot = 0 if model.shared else q
        if model.variant == "v1":
            nn.accumulate_grads(totals[slot][0], net_grads[0])
            nn.accumulate_grads(totals[slot][1], net_grads[1])
        else:
            nn.accumulate_grads(totals[slot], net_grads[0])
        gp_next = None if (model.detach_stages or q == 0) else gp_in
    return totals


def v1_stage(model: UnfoldedSic, q: int, y, system: SystemModel, noise_var,
             prev: StageIO, train: bool = False) -> StageIO:
    """Single v1 stage as an operation on (possibly batched) inputs."""
    if model.variant != "v1":
        raise ValueError("model is not a v1 equalizer")
    y, h, h_diag, noise_var = _as_batched(y, system.h, system.h_diag, noise_var)
    hk = np.swapaxes(h, 1, 2)
    p, _ = _stage_forward(model, q, np.asarray(prev.p, dtype=np.float64), y, h,
                          hk, h_diag, noise_var, system.m, train, False)
    return _stage_io(p, model.alphabet)


def v2_stage(model: UnfoldedSic, q: int, y, system: SystemModel, noise_var,
             prev: StageIO, train: bool = False) -> StageIO:
    if model.variant != "v2":
        raise ValueError("model is not a v2 equalizer")
    y, h, h_diag, noise_var = _as_batched(y, system.h, system.h_diag, noise_var)
    hk = np.swapaxes(h, 1, 2)
    p, _ = _stage_forward(model, q, np.asarray(prev.p, dtype=np.float64), y, h,
                          hk, h_diag, noise_var, system.m, train, False)
    return _stage_io(p, model.alphabet)


def hard_bits(stage: StageIO, alphabet: Alphabet) -> np.ndarray:
    """Final hard decisions: per-component argmax, ties to the lowest index."""
    idx = stage.p.argmax(axis=-1)  # (B, K, 2)
    codes = alphabet.code_of_level[idx]
    bpc = alphabet.bits_per_component
    shifts = np.arange(bpc - 1, -1, -1)
    bits = (codes[..., None] >> shifts) & 1
    return bits.reshape(bits.shape[0], -1).astype(np.uint8)


# ---------------------------------------------------------------------------
# Checkpoints: header (variant, sharing, stage count, alphabet, dimensions,
# sub-network widths) followed by the embedded network blobs in stage order.
# ---------------------------------------------------------------------------

_MAGIC = b"SLUF"
_VERSION = 1


def save_checkpoint(model: UnfoldedSic, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<BBB", 1 if model.variant == "v1" else 2,
                             int(model.shared), int(model.detach_stages)))
        fh.write(struct.pack("<III", model.n_stages, model.n_data, model.n_prime))
        name = model.alphabet.name.encode("ascii")
        fh.write(struct.pack("<B", len(name)))
        fh.write(name)
        mode = model.meta.get("mode", "").encode("ascii")
        fh.write(struct.pack("<BI", len(mode), int(model.meta.get("n_guard", 0))))
        fh.write(mode)
        if model.variant == "v1":
            fh.write(struct.pack("<IIII", model.widths["n_layers_prec"],
                                 model.widths["n_hidden_prec"],
                                 model.widths["n_layers_prob"],
                                 model.widths["n_hidden_prob"]))
            for prec, prob in model.nets:
                nn.save_network(prec, fh)
                nn.save_network(prob, fh)
        else:
            fh.write(struct.pack("<II", model.widths["n_layers"],
                                 model.widths["n_hidden"]))
            for net in model.nets:
                nn.save_network(net, fh)


def load_checkpoint(path) -> UnfoldedSic:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("bad checkpoint magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        vcode, shared, detach = struct.unpack("<BBB", fh.read(3))
        n_stages, n_data, n_prime = struct.unpack("<III", fh.read(12))
        (name_len,) = struct.unpack("<B", fh.read(1))
        alphabet = make_alphabet(fh.read(name_len).decode("ascii"))
        mode_len, n_guard = struct.unpack("<BI", fh.read(5))
        mode = fh.read(mode_len).decode("ascii")
        variant = "v1" if vcode == 1 else "v2"
        n_sets = 1 if shared else n_stages
        if variant == "v1":
            widths = dict(zip(
                ("n_layers_prec", "n_hidden_prec", "n_layers_prob", "n_hidden_prob"),
                struct.unpack("<IIII", fh.read(16))))
            nets = [(nn.load_network(fh), nn.load_network(fh)) for _ in range(n_sets)]
        else:
            widths = dict(zip(("n_layers", "n_hidden"), struct.unpack("<II", fh.read(8))))
            nets = [nn.load_network(fh) for _ in range(n_sets)]
    return UnfoldedSic(variant, bool(shared), n_stages, alphabet, n_data,
                       n_prime, widths, nets, bool(detach),
                       {"mode": mode, "n_guard": n_guard})
