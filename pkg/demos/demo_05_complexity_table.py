"""Real-multiplication counts of every estimator for the three standard
setups (rounded to hundreds, with the exact raw count alongside).

Run:  python3 demos/demo_05_complexity_table.py
"""
from scfde_lab.harness import ComplexityInput, complexity

SETUPS = {
    "UW QPSK": dict(dims=dict(n_data=20, n_prime=32, n_guard=12, n_levels=2),
                    v1=dict(n_iter=7, n_layers_prec=3, n_hidden_prec=70,
                            n_layers_prob=2, n_hidden_prob=10),
                    v2=dict(n_iter=7, n_layers=4, n_hidden=200),
                    det=dict(n_iter=15, det_hidden=200, det_aux=20),
                    kaf=dict(n_layers=12, n_hidden=250),
                    oamp=dict(n_iter=8), sic=dict(n_iter=3)),
    "UW 16QAM": dict(dims=dict(n_data=20, n_prime=32, n_guard=12, n_levels=4),
                     v1=dict(n_iter=7, n_layers_prec=3, n_hidden_prec=70,
                             n_layers_prob=3, n_hidden_prob=20),
                     v2=dict(n_iter=7, n_layers=4, n_hidden=230),
                     det=dict(n_iter=15, det_hidden=220, det_aux=25),
                     kaf=dict(n_layers=12, n_hidden=280),
                     oamp=dict(n_iter=8), sic=dict(n_iter=3)),
    "CP QPSK": dict(dims=dict(n_data=32, n_prime=32, n_guard=12, n_levels=2),
                    v1=dict(n_iter=7, n_layers_prec=3, n_hidden_prec=100,
                            n_layers_prob=2, n_hidden_prob=10),
                    v2=dict(n_iter=7, n_layers=4, n_hidden=250),
                    det=dict(n_iter=15, det_hidden=250, det_aux=30),
                    kaf=dict(n_layers=12, n_hidden=300),
                    oamp=dict(n_iter=10), sic=dict(n_iter=3)),
}

ROWS = [("SICNNv1", "v1"), ("SICNNv2", "v2"), ("DetNet", "det"),
        ("KAFCNN", "kaf"), ("OAMPNet2", "oamp"),
        ("LMMSE_burst", None), ("LMMSE_eq", None),
        ("LMMSE_CP_burst", None), ("LMMSE_CP_eq", None),
        ("DFE_burst", None), ("DFE_eq", None), ("itSIC", "sic")]

print(f"{'estimator':<15}" + "".join(f"{name:>16}" for name in SETUPS))
for tag, key in ROWS:
    cells = []
    for setup in SETUPS.values():
        extra = setup[key] if key else {}
        _, rounded = complexity(ComplexityInput(tag=tag, **setup["dims"], **extra))
        cells.append(f"{rounded:>16,}")
    print(f"{tag:<15}" + "".join(cells))

print("\nexact raw counts for the UW QPSK column:")
for tag, key in ROWS:
    setup = SETUPS["UW QPSK"]
    extra = setup[key] if key else {}
    raw, _ = complexity(ComplexityInput(tag=tag, **setup["dims"], **extra))
    print(f"  {tag:<15} {float(raw):>14,.1f}")
