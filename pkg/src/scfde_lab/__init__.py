"""Desk-scale SC-FDE equalization laboratory.

Submodules:

* ``numerics``   -- complex linear algebra, seeded random streams
* ``channel``    -- multipath sampling, composite diagonal response
* ``scfde``      -- alphabets, guard modes, block transmission
* ``equalizers`` -- LMMSE / DFE / iterative soft interference cancellation
* ``nn``         -- minimal dense-network engine with analytic backprop
* ``unfolded``   -- deep-unfolded soft-IC neural equalizers (v1 / v2 / shared)
* ``training``   -- input normalization, error-focused dataset generation, training loop
* ``harness``    -- BER sweeps, exact MAP oracle, complexity calculators, CSV reports
* ``cli``        -- configuration-driven command line front end
"""

from . import channel, equalizers, harness, nn, numerics, scfde, training, unfolded  # noqa: F401

__all__ = [
    "channel",
    "equalizers",
    "harness",
    "nn",
    "numerics",
    "scfde",
    "training",
    "unfolded",
]

__version__ = "0.1.0"
