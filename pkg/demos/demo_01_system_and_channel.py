"""Walk through the block-transmission model: multipath sampling, the
composite diagonal response, guard modes, and the noise law.

Run:  python3 demos/demo_01_system_and_channel.py
"""
import numpy as np

from scfde_lab.channel import ChannelParams, composite_diag, default_n_taps, sample_channel
from scfde_lab.numerics import Rng
from scfde_lab.scfde import build_system, ebn0_to_noise_var, make_alphabet, modulate, transmit_blocks

rng = Rng(2024)

# ---------------------------------------------------------------------------
# 1. Tapped-delay-line channels: Rayleigh magnitudes, exponential power decay
# ---------------------------------------------------------------------------
params = ChannelParams(tau_rms=100e-9, t_s=52e-9,
                       n_taps=default_n_taps(100e-9, 52e-9, n_guard=12))
print(f"channel: tau_rms=100ns, t_s=52ns -> {params.n_taps} taps")
taps = sample_channel(rng.substream("chan"), params)
print(f"tap energies: {np.round(np.abs(taps)**2, 3)}  (sum = "
      f"{np.sum(np.abs(taps)**2):.9f})")

# ---------------------------------------------------------------------------
# 2. The receiver sees a real nonnegative diagonal: |DFT(taps)|^2.
#    Its trace equals the block length (Parseval), and deep fades do occur.
# ---------------------------------------------------------------------------
g = composite_diag(taps, 32)
print(f"\ncomposite diagonal: min {g.min():.4f}, max {g.max():.4f}, "
      f"trace {g.sum():.4f} (= 32)")
two_tap = composite_diag(np.array([1.0, 1.0]) / np.sqrt(2), 4)
print(f"two equal taps over 4 bins -> exact spectral zero: {two_tap}")

# ---------------------------------------------------------------------------
# 3. Guard modes share one model y = diag(g) M d + w. The unique-word mode
#    subtracts the known guard contribution; with u = 0 nothing changes.
# ---------------------------------------------------------------------------
alphabet = make_alphabet("qpsk")
uw = build_system("uw", 20, 12, g)
print(f"\nUW system: M is {uw.m.shape}, first row all ones: "
      f"{np.allclose(uw.m[0], 1.0)}")
print(f"column orthogonality: M^H M = n' I holds to "
      f"{np.max(np.abs(uw.m.conj().T @ uw.m - 32 * np.eye(20))):.2e}")

# ---------------------------------------------------------------------------
# 4. Noise at the equalizer input is coloured by the diagonal: CN(0, n' s2 g)
# ---------------------------------------------------------------------------
noise_var = ebn0_to_noise_var(10.0, alphabet)
print(f"\nEb/N0 = 10 dB -> time-domain noise variance {noise_var}")
d = modulate(rng.substream("bits").integers(0, 2, (4000, 40)), alphabet)
y = transmit_blocks(d, uw, noise_var, rng.substream("noise"))
resid = y - d @ uw.h.T
emp = np.mean(np.abs(resid) ** 2, axis=0)
print("empirical vs model noise variance (first 6 bins):")
print("  empirical:", np.round(emp[:6], 4))
print("  model    :", np.round(32 * noise_var * g[:6], 4))
