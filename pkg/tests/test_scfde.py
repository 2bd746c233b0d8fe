import numpy as np
import pytest

from scfde_lab.channel import ChannelParams, composite_diag, sample_channel
from scfde_lab.numerics import Rng, dft_matrix
from scfde_lab.scfde import (
    SystemSpec,
    build_system,
    ebn0_to_noise_var,
    hard_decide,
    make_alphabet,
    modulate,
    symbols_to_onehot,
    transmit,
    transmit_blocks,
)

RHO = 1.0 / np.sqrt(2.0)


class TestAlphabet:
    def test_qpsk_levels_and_variance(self):
        a = make_alphabet("qpsk")
        assert np.allclose(a.levels, [-RHO, RHO])
        assert a.sym_var == 1.0
        assert abs(np.mean(np.abs(a.symbols) ** 2) - 1.0) < 1e-12

    def test_qpsk_zero_bits_map_to_negative(self):
        a = make_alphabet("qpsk")
        d = modulate(np.array([0, 0]), a)
        assert np.allclose(d, [-RHO - 1j * RHO])

    def test_qpsk_roundtrip_all_symbols(self):
        a = make_alphabet("qpsk")
        for bits in ([0, 0], [0, 1], [1, 0], [1, 1]):
            b = np.array(bits)
            assert np.array_equal(hard_decide(modulate(b, a), a), b)

    def test_16qam_levels_unit_energy(self):
        a = make_alphabet("16qam")
        # levels {+-1, +-3}/sqrt(10): mean of {1, 9} * 2 / 10 = 1
        assert np.allclose(np.sort(np.abs(a.levels)), [1, 1, 3, 3] / np.sqrt(10))
        assert abs(np.mean(np.abs(a.symbols) ** 2) - 1.0) < 1e-12

    def test_16qam_roundtrip_random(self):
        a = make_alphabet("16qam")
        bits = Rng(0).integers(0, 2, (20, 6 * 4)).astype(np.uint8)
        assert np.array_equal(hard_decide(modulate(bits, a), a), bits)

    def test_gray_adjacent_levels_differ_one_bit(self):
        a = make_alphabet("16qam")
        codes = a.code_of_level
        for i in range(len(codes) - 1):
            assert bin(codes[i] ^ codes[i + 1]).count("1") == 1

    def test_onehot_labels(self):
        a = make_alphabet("qpsk")
        d = modulate(np.array([0, 1, 1, 0]), a)  # two symbols
        oh = symbols_to_onehot(d, a)
        assert oh.shape == (2, 2, 2)
        assert np.allclose(oh[0, 0], [1, 0])  # re bit 0 -> level -rho
        assert np.allclose(oh[0, 1], [0, 1])  # im bit 1 -> level +rho

    def test_unknown_alphabet(self):
        with pytest.raises(ValueError):
            make_alphabet("64qam")

    def test_bit_count_validation(self):
        with pytest.raises(ValueError):
            modulate(np.zeros(3, dtype=int), make_alphabet("qpsk"))


class TestBuildSystem:
    def test_cp_flat_channel(self):
        model = build_system("cp", 4, 0, np.ones(4))
        assert np.allclose(model.m, dft_matrix(4))
        assert np.allclose(model.h, model.m)

    def test_uw_dimensions_reference_setup(self):
        model = build_system("uw", 20, 12, np.ones(32))
        assert model.n_prime == 32
        assert model.m.shape == (32, 20)
        assert np.allclose(model.m, dft_matrix(32)[:, :20])
        assert np.allclose(model.m[0], np.ones(20))

    def test_column_orthogonality(self):
        for mode, nd, ng in (("cp", 8, 0), ("uw", 20, 12)):
            g = composite_diag(
                sample_channel(Rng(1), ChannelParams(100e-9, 52e-9, 8)),
                nd + ng if mode == "uw" else nd)
            model = build_system(mode, nd, ng, g)
            gram = model.m.conj().T @ model.m
            assert np.max(np.abs(gram - model.n_prime * np.eye(nd))) < 1e-10

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            build_system("uw", 20, 12, np.ones(20))
        with pytest.raises(ValueError):
            build_system("uw", 20, 12, np.ones(32), u=np.ones(3))


class TestTransmit:
    def test_noiseless_flat_cp(self):
        a = make_alphabet("qpsk")
        model = build_system("cp", 8, 0, np.ones(8))
        d = modulate(Rng(2).integers(0, 2, 16), a)
        tx = transmit(d, model, 0.0, Rng(3), alphabet=a)
        assert np.max(np.abs(tx.y - model.m @ d)) < 1e-12
        assert np.array_equal(tx.bits, hard_decide(d, a))

    def test_uw_zero_guard_sequence_is_plain_model(self):
        a = make_alphabet("qpsk")
        g = composite_diag(sample_channel(Rng(4), ChannelParams(100e-9, 52e-9, 8)), 32)
        model = build_system("uw", 20, 12, g)
        d = modulate(Rng(5).integers(0, 2, 40), a)
        y = transmit_blocks(d[None], model, 0.0, Rng(6))[0]
        assert np.max(np.abs(y - model.h @ d)) < 1e-10

    def test_uw_removal_cancels_any_guard_sequence(self):
        # same noise stream with and without a UW: identical equalizer input
        a = make_alphabet("qpsk")
        g = composite_diag(sample_channel(Rng(7), ChannelParams(100e-9, 52e-9, 8)), 32)
        u = Rng(8).complex_normal(12)
        with_u = build_system("uw", 20, 12, g, u=u)
        without = build_system("uw", 20, 12, g)
        d = modulate(Rng(9).integers(0, 2, (5, 40)), a)
        y1 = transmit_blocks(d, with_u, 0.01, Rng(10))
        y2 = transmit_blocks(d, without, 0.01, Rng(10))
        assert np.max(np.abs(y1 - y2)) < 1e-10

    def test_noise_covariance_matches_model(self):
        g = composite_diag(sample_channel(Rng(11), ChannelParams(100e-9, 52e-9, 4)), 8)
        model = build_system("cp", 8, 0, g)
        noise_var = 0.2
        n = 100_000
        y = transmit_blocks(np.zeros((n, 8), dtype=complex), model, noise_var, Rng(12))
        target = 8 * noise_var * g
        var = np.mean(np.abs(y) ** 2, axis=0)
        assert np.all(np.abs(var - target) <= 0.03 * np.maximum(target, 1e-12))

    def test_blocks_are_independent(self):
        model = build_system("cp", 4, 0, np.ones(4))
        y = transmit_blocks(np.zeros((50_000, 4), dtype=complex), model, 1.0, Rng(13))
        corr = np.mean(y[:-1, 0] * np.conj(y[1:, 0]))
        assert abs(corr) < 0.05


class TestEbn0:
    def test_qpsk_values(self):
        a = make_alphabet("qpsk")
        assert abs(ebn0_to_noise_var(0.0, a) - 0.5) < 1e-15
        assert abs(ebn0_to_noise_var(10.0, a) - 0.05) < 1e-15

    def test_16qam_value(self):
        assert abs(ebn0_to_noise_var(0.0, make_alphabet("16qam")) - 0.25) < 1e-15

    def test_strictly_decreasing(self):
        a = make_alphabet("qpsk")
        grid = [ebn0_to_noise_var(db, a) for db in np.linspace(-5, 20, 26)]
        assert all(x > y for x, y in zip(grid, grid[1:]))


def test_system_spec_helpers():
    spec = SystemSpec("uw", 20, 12, "qpsk")
    assert spec.n_prime == 32
    assert spec.bits_per_block() == 40
    assert SystemSpec("cp", 32, 12, "qpsk").n_prime == 32
    with pytest.raises(ValueError):
        SystemSpec("zp", 8, 0, "qpsk")
