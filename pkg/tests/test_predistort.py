"""Tests for the symbol-neighborhood predistortion table."""

import numpy as np
import pytest

from tfpack.channel import TransponderSpec, default_transponder
from tfpack.predistort import (
    PredistorterLut,
    apply_predistortion,
    center_sample_errors,
    identity_lut,
    load_lut_csv,
    save_lut_csv,
    train_predistorter,
)
from tfpack.waveform import PackingGrid, build_constellation, rrc_pulse

RNG_SEED = 20260823


def packed_grid():
    return PackingGrid(0.75, 0.90, t_ref=1.0, f_ref=41.5 / 27.5)


def nonlinear_spec(pulse, grid, ibo_db=2.5):
    fs = pulse.samples_per_symbol / grid.symbol_time
    return default_transponder(fs, grid.f_ref, input_backoff_db=ibo_db)


def paired_mse_gain(lut, spec, pulse, grid, n_symbols, seed):
    """Identity-vs-trained squared errors on one held-out stream."""
    base = center_sample_errors(
        identity_lut(lut.constellation, lut.l_p),
        spec,
        pulse,
        grid,
        n_symbols,
        np.random.default_rng(seed),
    )
    trained = center_sample_errors(
        lut, spec, pulse, grid, n_symbols, np.random.default_rng(seed)
    )
    return np.abs(base) ** 2 - np.abs(trained) ** 2


# ---------------------------------------------------------------------------
# table container and lookup
# ---------------------------------------------------------------------------


def test_table_sizes_match_neighborhood_width():
    qpsk = build_constellation("QPSK")
    apsk32 = build_constellation("32APSK")
    assert identity_lut(qpsk, 2).table.shape == (4**5,)
    assert identity_lut(apsk32, 1).table.shape == (32**3,)
    assert identity_lut(qpsk, 0).table.shape == (4,)


def test_table_size_validation():
    qpsk = build_constellation("QPSK")
    with pytest.raises(ValueError, match="entries"):
        PredistorterLut(constellation=qpsk, l_p=1, table=np.ones(16, dtype=complex))
    with pytest.raises(ValueError, match="negative"):
        PredistorterLut(constellation=qpsk, l_p=-1, table=np.ones(4, dtype=complex))


def test_identity_lut_is_passthrough():
    cons = build_constellation("8PSK")
    rng = np.random.default_rng(RNG_SEED)
    idx = rng.integers(0, cons.size, size=200)
    for l_p in (0, 1, 2):
        out = apply_predistortion(idx, identity_lut(cons, l_p))
        np.testing.assert_array_equal(out, cons.points[idx])


def test_constant_stream_maps_to_constant():
    cons = build_constellation("QPSK")
    rng = np.random.default_rng(RNG_SEED)
    lut = PredistorterLut(
        constellation=cons,
        l_p=1,
        table=rng.standard_normal(64) + 1j * rng.standard_normal(64),
    )
    out = apply_predistortion(np.full(50, 3), lut)
    assert np.all(out == out[0])


def test_shift_covariance_with_cyclic_edges():
    cons = build_constellation("QPSK")
    rng = np.random.default_rng(RNG_SEED)
    lut = PredistorterLut(
        constellation=cons,
        l_p=2,
        table=rng.standard_normal(1024) + 1j * rng.standard_normal(1024),
    )
    idx = rng.integers(0, 4, size=97)
    direct = apply_predistortion(np.roll(idx, 11), lut)
    np.testing.assert_array_equal(direct, np.roll(apply_predistortion(idx, lut), 11))


def test_apply_validation():
    cons = build_constellation("QPSK")
    lut = identity_lut(cons, 2)
    with pytest.raises(ValueError, match="one-dimensional"):
        apply_predistortion(np.zeros((3, 5), dtype=int), lut)
    with pytest.raises(ValueError, match="at least 5"):
        apply_predistortion(np.zeros(3, dtype=int), lut)
    with pytest.raises(ValueError, match="indices"):
        apply_predistortion(np.array([0, 1, 2, 3, 4, 9]), lut)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_training_validation():
    cons = build_constellation("QPSK")
    pulse = rrc_pulse(0.2)
    grid = packed_grid()
    spec = TransponderSpec(hpa=None)
    with pytest.raises(ValueError, match="l_p"):
        train_predistorter(spec, pulse, grid, cons, l_p=3)
    with pytest.raises(ValueError, match="iterations"):
        train_predistorter(spec, pulse, grid, cons, l_p=0, iterations=0)
    with pytest.raises(ValueError, match="step_size"):
        train_predistorter(spec, pulse, grid, cons, l_p=0, step_size=0.0)
    with pytest.raises(ValueError, match="step_size"):
        train_predistorter(spec, pulse, grid, cons, l_p=0, step_size=1.5)
    with pytest.raises(ValueError, match="n_train"):
        train_predistorter(spec, pulse, grid, cons, l_p=0, n_train=0)


def test_linear_chain_trains_to_identity():
    pulse = rrc_pulse(0.2)
    grid = packed_grid()
    spec = TransponderSpec(hpa=None)
    for name, l_p in (("QPSK", 1), ("8PSK", 0)):
        cons = build_constellation(name)
        lut = train_predistorter(spec, pulse, grid, cons, l_p=l_p, n_train=4096)
        dev = np.max(np.abs(lut.table - identity_lut(cons, l_p).table))
        assert dev < 1e-6


def test_linear_chain_has_zero_residual():
    pulse = rrc_pulse(0.2)
    grid = packed_grid()
    cons = build_constellation("QPSK")
    spec = TransponderSpec(hpa=None)
    errs = center_sample_errors(
        identity_lut(cons, 1), spec, pulse, grid, 500, np.random.default_rng(1)
    )
    assert np.max(np.abs(errs)) < 1e-12


def test_trained_qpsk_reduces_center_sample_mse():
    pulse = rrc_pulse(0.2)
    grid = packed_grid()
    cons = build_constellation("QPSK")
    spec = nonlinear_spec(pulse, grid)
    lut = train_predistorter(
        spec, pulse, grid, cons, l_p=2, iterations=12, n_train=1 << 15
    )
    # paired one-sided test at well beyond 95% on a held-out stream
    diff = paired_mse_gain(lut, spec, pulse, grid, 3000, seed=5)
    t_stat = diff.mean() / (diff.std(ddof=1) / np.sqrt(len(diff)))
    assert t_stat > 1.645
    ratio = 1.0 - diff.mean() / np.mean(
        np.abs(
            center_sample_errors(
                identity_lut(cons, 2), spec, pulse, grid, 3000, np.random.default_rng(5)
            )
        )
        ** 2
    )
    assert ratio < 0.6


def test_trained_lut_never_hurts_across_streams():
    pulse = rrc_pulse(0.2)
    grid = packed_grid()
    cons = build_constellation("QPSK")
    spec = nonlinear_spec(pulse, grid)
    lut = train_predistorter(
        spec, pulse, grid, cons, l_p=1, iterations=10, n_train=1 << 14
    )
    for seed in (11, 12, 13):
        diff = paired_mse_gain(lut, spec, pulse, grid, 2000, seed=seed)
        t_stat = diff.mean() / (diff.std(ddof=1) / np.sqrt(len(diff)))
        assert t_stat > 1.645


def test_32apsk_training_improves_mse():
    pulse = rrc_pulse(0.2)
    grid = packed_grid()
    cons = build_constellation("32APSK")
    spec = nonlinear_spec(pulse, grid)
    lut = train_predistorter(
        spec, pulse, grid, cons, l_p=1, iterations=5, n_train=16 * 32**3
    )
    assert lut.table.shape == (32**3,)
    base = center_sample_errors(
        identity_lut(cons, 1), spec, pulse, grid, 3000, np.random.default_rng(4)
    )
    trained = center_sample_errors(
        lut, spec, pulse, grid, 3000, np.random.default_rng(4)
    )
    assert np.mean(np.abs(trained) ** 2) < 0.95 * np.mean(np.abs(base) ** 2)


def test_training_is_deterministic():
    pulse = rrc_pulse(0.2)
    grid = packed_grid()
    cons = build_constellation("QPSK")
    spec = nonlinear_spec(pulse, grid)
    a = train_predistorter(spec, pulse, grid, cons, l_p=1, iterations=5, n_train=4096)
    b = train_predistorter(spec, pulse, grid, cons, l_p=1, iterations=5, n_train=4096)
    assert np.array_equal(a.table, b.table)
    c = train_predistorter(
        spec, pulse, grid, cons, l_p=1, iterations=5, n_train=4096, seed=9
    )
    assert not np.array_equal(a.table, c.table)


def test_trained_mean_power_stays_near_unit():
    pulse = rrc_pulse(0.2)
    grid = packed_grid()
    cons = build_constellation("QPSK")
    spec = nonlinear_spec(pulse, grid)
    lut = train_predistorter(spec, pulse, grid, cons, l_p=1, iterations=8, n_train=8192)
    assert abs(lut.mean_power() - 1.0) < 0.02


def test_divergence_abort_names_the_tuple():
    pulse = rrc_pulse(0.2)
    grid = packed_grid()
    cons = build_constellation("QPSK")
    spec = nonlinear_spec(pulse, grid)
    with pytest.raises(ValueError, match=r"diverged at tuple \("):
        train_predistorter(
            spec, pulse, grid, cons, l_p=0, n_train=2048, magnitude_cap=0.5
        )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_csv_roundtrip_is_exact(tmp_path):
    cons = build_constellation("QPSK")
    rng = np.random.default_rng(RNG_SEED)
    lut = PredistorterLut(
        constellation=cons,
        l_p=1,
        table=rng.standard_normal(64) + 1j * rng.standard_normal(64),
    )
    path = tmp_path / "lut.csv"
    save_lut_csv(path, lut)
    back = load_lut_csv(path, cons)
    assert back.l_p == 1
    assert np.array_equal(back.table, lut.table)


def test_csv_rejects_bad_files(tmp_path):
    cons = build_constellation("QPSK")
    bad = tmp_path / "bad.csv"
    bad.write_text("idx,re,im\n0,1.0,0.0\n")
    with pytest.raises(ValueError, match="header"):
        load_lut_csv(bad, cons)
    stub = tmp_path / "stub.csv"
    stub.write_text(
        "index,real,imag\n" + "".join(f"{i},1.0,0.0\n" for i in range(16))
    )
    with pytest.raises(ValueError, match="odd power"):
        load_lut_csv(stub, cons)
