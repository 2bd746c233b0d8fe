"""Train a small unfolded soft-IC equalizer end to end and race it against
LMMSE on held-out channels.

This is a miniature of the full pipeline (a few hundred channels, a 3-stage
network); expect a handful of minutes. The desk-scale recipe in
configs/uw_qpsk_desk.cfg reaches roughly an order of magnitude below LMMSE
at 10 dB in about half an hour.

Run:  python3 demos/demo_04_train_unfolded.py
"""
import numpy as np

from scfde_lab import unfolded
from scfde_lab.channel import ChannelParams
from scfde_lab.harness import EqualizerSpec, SweepConfig, ber_sweep
from scfde_lab.numerics import Rng
from scfde_lab.scfde import SystemSpec
from scfde_lab.training import GenConfig, TrainSchedule, generate_training_set, train

spec = SystemSpec("uw", 20, 12, "qpsk")
chan = ChannelParams(tau_rms=100e-9, t_s=52e-9, n_taps=12)
alphabet = spec.make_alphabet()

print("generating an error-focused dataset (400 train / 60 val channels)...")
gen = GenConfig(n_errors_min=3, n_burst=100, n_check=10,
                snr_range_db=(2.0, 12.5), n_channels=400, baseline="lmmse")
train_set = generate_training_set(gen, spec, chan, Rng(1).substream("gen-train"))
val_cfg = GenConfig(n_errors_min=3, n_burst=100, n_check=10,
                    snr_range_db=(2.0, 12.5), n_channels=60, baseline="lmmse")
val_set = generate_training_set(val_cfg, spec, chan, Rng(1).substream("gen-val"))
print(f"  {train_set.n_records} train / {val_set.n_records} val records")

model = unfolded.build_v1(alphabet, 20, 32, n_stages=3, rng=Rng(1).substream("init"),
                          n_layers_prec=3, n_hidden_prec=48,
                          n_layers_prob=2, n_hidden_prob=10)
model.meta = {"mode": "uw", "n_guard": 12}
print("training 6 epochs (3-stage network, 48/10 hidden units)...")
best, history = train(model, train_set, val_set,
                      TrainSchedule(epochs=6, batch_size=256,
                                    learning_rate=6e-4, seed=1), spec)
for epoch, loss, ber in history:
    print(f"  epoch {epoch}: loss {loss:.4f}  hard-set val BER {ber:.4f}")
unfolded.save_checkpoint(best, "demo_v1.ckpt")

print("\npaired sweep against LMMSE on 150 held-out channels...")
cfg = SweepConfig(ebn0_db=(6.0, 8.0, 10.0), n_channels=150,
                  blocks_per_burst=60, seed=99)
roster = {"lmmse": EqualizerSpec("lmmse"),
          "unfolded_v1": EqualizerSpec("unfolded", checkpoint="demo_v1.ckpt")}
report = ber_sweep(cfg, spec, chan, roster)
for ebn0 in cfg.ebn0_db:
    l = report.row("lmmse", ebn0)
    n = report.row("unfolded_v1", ebn0)
    print(f"  {ebn0:4.1f} dB: lmmse {l.ber:.3e}  unfolded {n.ber:.3e}  "
          f"({l.errors} vs {n.errors} errors)")
print("checkpoint written to demo_v1.ckpt")
