"""Transponder chain tests: HPA models, mux filters, noise, link budget."""

import json

import numpy as np
import pytest
import scipy.integrate

from tfpack.channel import (
    LinkBudget,
    TransponderSpec,
    add_awgn,
    apply_transponder,
    default_transponder,
    load_transponder_json,
    measure_obo,
    mux_downlink,
    mux_filter_taps,
    n0_for_snr,
    saleh_hpa,
    snr_from_budget,
    tabulated_hpa,
)
from tfpack.waveform import (
    PackingGrid,
    SampleBuffer,
    build_constellation,
    rrc_pulse,
    synthesize_uplink,
)

SALEH = dict(alpha_a=2.1587, beta_a=1.1517, alpha_p=4.0033, beta_p=9.1040)


# ---------------------------------------------------------------------------
# HPA models
# ---------------------------------------------------------------------------


def test_saleh_zero_input_and_saturation_power():
    hpa = saleh_hpa()
    out = hpa.transfer(np.array([0.0 + 0.0j]))
    assert out[0] == 0.0
    # constant-envelope tone exactly at r_sat comes out at p_sat
    tone = hpa.r_sat * np.exp(1j * np.linspace(0, 2 * np.pi, 64, endpoint=False))
    p_out = np.mean(np.abs(hpa.transfer(tone)) ** 2)
    assert p_out == pytest.approx(hpa.p_sat, rel=1e-12)
    assert hpa.r_sat == pytest.approx(1.0 / np.sqrt(SALEH["beta_a"]))
    assert hpa.p_sat == pytest.approx((SALEH["alpha_a"] / (2 * np.sqrt(SALEH["beta_a"]))) ** 2)


def test_saleh_amam_peaks_at_r_sat():
    hpa = saleh_hpa()
    r = np.linspace(0.01, 3.0, 2000)
    a = np.abs(hpa.transfer(r + 0j))
    assert r[np.argmax(a)] == pytest.approx(hpa.r_sat, abs=2e-3)
    # compression: past saturation the envelope comes back down
    assert a[-1] < a.max() * 0.9


def test_saleh_phase_rotation_grows_with_drive():
    hpa = saleh_hpa()
    ph = np.angle(hpa.transfer(np.array([0.1 + 0j, 0.5 + 0j, 1.0 + 0j])))
    assert np.all(np.diff(ph) > 0)
    # asymptote alpha_p/beta_p
    ph_inf = np.angle(hpa.transfer(np.array([50.0 + 0j])))[0]
    assert ph_inf == pytest.approx(SALEH["alpha_p"] / SALEH["beta_p"], rel=1e-3)


def test_saleh_third_order_intermod_quadrature_oracle():
    # two equal tones at +-delta form the envelope |2A cos(delta t)|; the
    # memoryless odd extension g(u) = A(|u|) exp(j Phi(|u|)) sign(u) then
    # has a third harmonic whose coefficient is
    #   b3 = (1/2pi) integral g(2A cos th) exp(-j 3 th) dth.
    # Oracle via adaptive quadrature, subject via transfer() + DFT bin.
    hpa = saleh_hpa()
    A = 0.3

    def g_of_theta(theta):
        u = 2 * A * np.cos(theta)
        r = np.abs(u)
        amp = SALEH["alpha_a"] * r / (1 + SALEH["beta_a"] * r**2)
        phs = SALEH["alpha_p"] * r**2 / (1 + SALEH["beta_p"] * r**2)
        return np.sign(u) * amp * np.exp(1j * phs)

    re = scipy.integrate.quad(lambda t: (g_of_theta(t) * np.exp(-3j * t)).real,
                              0, 2 * np.pi, limit=200)[0]
    im = scipy.integrate.quad(lambda t: (g_of_theta(t) * np.exp(-3j * t)).imag,
                              0, 2 * np.pi, limit=200)[0]
    b3_oracle = (re + 1j * im) / (2 * np.pi)
    assert abs(b3_oracle) > 1e-3  # genuinely measurable distortion product

    n = 4096
    theta = 2 * np.pi * np.arange(n) / n
    y = hpa.transfer(2 * A * np.cos(theta) + 0j)
    b3_dft = np.mean(y * np.exp(-3j * theta))
    assert abs(b3_dft - b3_oracle) < 1e-8 * abs(b3_oracle) + 1e-12


def test_intermod_absent_when_bypassed():
    n = 4096
    theta = 2 * np.pi * np.arange(n) / n
    x = 0.6 * np.cos(theta) + 0j
    b3 = np.mean(x * np.exp(-3j * theta))
    assert abs(b3) < 1e-15


def test_tabulated_matches_generating_curve():
    hpa_ref = saleh_hpa()
    in_db = np.linspace(-25.0, 6.0, 60)
    r = 10 ** (in_db / 20)
    out_db = 20 * np.log10(np.abs(hpa_ref.transfer(r + 0j)))
    ph_deg = np.rad2deg(np.angle(hpa_ref.transfer(r + 0j)))
    table = np.column_stack([in_db, out_db, ph_deg])
    hpa_tab = tabulated_hpa(table)

    probe = 10 ** (np.linspace(-20.0, 5.0, 37) / 20)
    y_ref = hpa_ref.transfer(probe + 0j)
    y_tab = hpa_tab.transfer(probe + 0j)
    assert np.max(np.abs(y_tab - y_ref)) < 5e-3 * np.max(np.abs(y_ref))


def test_tabulated_refuses_extrapolation():
    table = [[-10.0, -9.0, 1.0], [-5.0, -4.5, 5.0], [0.0, -1.0, 20.0]]
    hpa = tabulated_hpa(np.array(table))
    with pytest.raises(ValueError, match="extrapolation"):
        hpa.transfer(np.array([2.0 + 0j]))


def test_tabulated_rejects_nonmonotone_amam():
    table = [[-10.0, -9.0, 0.0], [-5.0, -11.0, 0.0], [0.0, -1.0, 0.0], [3.0, 0.0, 0.0]]
    with pytest.raises(ValueError, match="monoton"):
        tabulated_hpa(np.array(table))
    with pytest.raises(ValueError, match="rows"):
        tabulated_hpa(np.array([[0.0, 0.0, 0.0]]))


# ---------------------------------------------------------------------------
# mux filters
# ---------------------------------------------------------------------------


def test_mux_filter_response():
    fs = 10.0
    bw = 2.0
    taps = mux_filter_taps(bw, fs)
    assert len(taps) % 2 == 1
    assert np.allclose(taps, taps[::-1])

    nfft = 1 << 14
    h = np.abs(np.fft.rfft(taps, nfft))
    f = np.fft.rfftfreq(nfft, d=1.0 / fs)
    h0 = h[0]

    # -3 dB at half the two-sided bandwidth
    i3 = np.argmin(np.abs(f - bw / 2))
    assert 20 * np.log10(h[i3] / h0) == pytest.approx(-3.0, abs=0.2)
    # passband ripple stays small
    pb = h[f < 0.8 * bw / 2]
    assert np.max(np.abs(20 * np.log10(pb / h0))) < 0.6
    # strong attenuation one bandwidth further out
    sb = h[f > 1.5 * bw]
    assert np.max(20 * np.log10(sb / h0)) < -40.0


def test_mux_filter_even_request_rounds_up():
    taps = mux_filter_taps(2.0, 10.0, num_taps=64)
    assert len(taps) == 65


# ---------------------------------------------------------------------------
# transponder chain
# ---------------------------------------------------------------------------


def _one_carrier(label, seed, k=4000):
    grid = PackingGrid(tau=1.0, nu=1.3, t_ref=1.0, f_ref=1.509, num_users=1)
    p = rrc_pulse(0.2, 16, 8)
    rng = np.random.default_rng(seed)
    c = build_constellation(label)
    x = c.points[rng.integers(0, c.size, (1, k))]
    return synthesize_uplink(x, grid, p), p


def test_drive_scale_sets_mean_power():
    spec = TransponderSpec(hpa=saleh_hpa(), input_backoff_db=3.0)
    buf, _ = _one_carrier("QPSK", 7)
    s = spec.drive_scale(buf.mean_power(trim=16 * 8))
    driven = SampleBuffer(s * buf.samples, buf.sample_rate)
    target = spec.hpa.r_sat**2 * 10 ** (-0.3)
    assert driven.mean_power(trim=16 * 8) == pytest.approx(target, rel=1e-9)


def test_obo_monotone_in_input_backoff():
    buf, p = _one_carrier("QPSK", 8)
    trim = p.span_symbols * p.samples_per_symbol
    obos = []
    for ibo in (1.0, 3.0, 6.0):
        spec = default_transponder(buf.sample_rate, f_ref=1.0, input_backoff_db=ibo)
        s = spec.drive_scale(buf.mean_power(trim=trim))
        out = apply_transponder(SampleBuffer(s * buf.samples, buf.sample_rate), spec)
        obos.append(measure_obo(spec, out, trim=trim))
    assert obos[0] < obos[1] < obos[2]


def test_obo_higher_for_peaky_modulation():
    # 16APSK has a larger envelope spread than QPSK, so at the same input
    # backoff more of its power sits in compression and the mean output
    # power drops below the QPSK case.
    trim = 16 * 8
    obo = {}
    for label in ("QPSK", "16APSK"):
        buf, _ = _one_carrier(label, 9, k=8000)
        spec = default_transponder(buf.sample_rate, f_ref=1.0, input_backoff_db=2.0)
        s = spec.drive_scale(buf.mean_power(trim=trim))
        out = apply_transponder(SampleBuffer(s * buf.samples, buf.sample_rate), spec)
        obo[label] = measure_obo(spec, out, trim=trim)
    assert obo["16APSK"] > obo["QPSK"]


def test_linear_transponder_identity():
    spec = TransponderSpec(hpa=None)
    buf, _ = _one_carrier("QPSK", 10, k=500)
    out = apply_transponder(buf, spec)
    assert np.array_equal(out.samples, buf.samples)
    with pytest.raises(ValueError):
        _ = spec.p_sat


# ---------------------------------------------------------------------------
# downlink muxing and noise
# ---------------------------------------------------------------------------


def test_mux_downlink_tone_placement():
    fs = 16.0
    spacing = 2.0
    n = 4096
    quiet = SampleBuffer(np.zeros(n, dtype=complex), fs)
    tone = SampleBuffer(np.ones(n, dtype=complex), fs)
    out = mux_downlink([quiet, quiet, tone], spacing)  # ell = +1 carrier
    spec = np.abs(np.fft.fft(out.samples))
    f = np.fft.fftfreq(n, d=1.0 / fs)
    assert f[np.argmax(spec)] == pytest.approx(spacing)


def test_mux_downlink_validation():
    fs = 16.0
    a = SampleBuffer(np.zeros(64, dtype=complex), fs)
    b = SampleBuffer(np.zeros(32, dtype=complex), fs)
    with pytest.raises(ValueError, match="odd"):
        mux_downlink([a, a], 1.0)
    with pytest.raises(ValueError, match="share"):
        mux_downlink([a, b, a], 1.0)
    with pytest.raises(ValueError, match="exceeds"):
        mux_downlink([a, a, a], 8.0)


def test_awgn_variance_and_determinism():
    fs = 4.0
    n0 = 0.25
    base = SampleBuffer(np.zeros(200000, dtype=complex), fs)
    out1 = add_awgn(base, n0, np.random.default_rng(42))
    out2 = add_awgn(base, n0, np.random.default_rng(42))
    assert np.array_equal(out1.samples, out2.samples)
    # per-sample variance 2 * n0 * fs (complex), split evenly re/im
    assert np.var(out1.samples) == pytest.approx(2 * n0 * fs, rel=0.02)
    assert np.var(out1.samples.real) == pytest.approx(n0 * fs, rel=0.03)
    with pytest.raises(ValueError):
        add_awgn(base, -1.0, np.random.default_rng(0))


def test_link_budget_snr_roundtrip():
    budget = LinkBudget(p_sat=2.0, n0=1e-3, bandwidth=40.0)
    snr = snr_from_budget(budget)
    assert snr == pytest.approx(2.0 / (1e-3 * 40.0))
    n0 = n0_for_snr(10 * np.log10(snr), p_sat=2.0, bandwidth=40.0)
    assert n0 == pytest.approx(1e-3, rel=1e-12)
    with pytest.raises(ValueError):
        LinkBudget(p_sat=-1.0, n0=1e-3, bandwidth=40.0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_transponder_json_roundtrip(tmp_path):
    cfg = {
        "hpa": {"model": "saleh"},
        "imux": {"bw_factor": 1.0},
        "omux": {"bw_factor": 1.1},
        "input_backoff_db": 2.5,
    }
    path = tmp_path / "tp.json"
    path.write_text(json.dumps(cfg))
    spec = load_transponder_json(path, sample_rate=8.0, f_ref=1.0)
    assert spec.input_backoff_db == 2.5
    assert spec.hpa is not None and spec.imux_taps is not None

    cfg2 = {"hpa": {"model": "bypass"}, "imux": {"bypass": True}, "omux": {"bypass": True}}
    path2 = tmp_path / "tp2.json"
    path2.write_text(json.dumps(cfg2))
    spec2 = load_transponder_json(path2, sample_rate=8.0, f_ref=1.0)
    assert spec2.hpa is None and spec2.imux_taps is None and spec2.omux_taps is None

    path3 = tmp_path / "tp3.json"
    path3.write_text(json.dumps({"hpa": {"model": "wat"}}))
    with pytest.raises(ValueError, match="unknown"):
        load_transponder_json(path3, sample_rate=8.0, f_ref=1.0)
