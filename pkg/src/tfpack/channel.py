"""
Satellite transponder chain and downlink impairments
====================================================

Per-carrier processing on board: an input multiplexing filter (IMUX)
selects the carrier, a memoryless high-power amplifier (HPA) applies
AM/AM and AM/PM conversion, and an output multiplexing filter (OMUX)
limits the spectral regrowth.  The downlink superimposes all transponder
outputs on the downlink carrier grid and adds white Gaussian noise of
power spectral density 2*N0.

The HPA operating point is set through ``input_backoff_db`` (power backoff
of the mean drive relative to the input saturation point); the resulting
output backoff is a measurement, not a parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.interpolate
import scipy.signal

from .waveform import SampleBuffer

__all__ = [
    "HpaModel",
    "saleh_hpa",
    "tabulated_hpa",
    "TransponderSpec",
    "LinkBudget",
    "mux_filter_taps",
    "default_transponder",
    "load_transponder_json",
    "apply_transponder",
    "mux_downlink",
    "add_awgn",
    "measure_obo",
    "snr_from_budget",
]


# Classic travelling-wave-tube amplifier coefficients (Saleh model).
SALEH_ALPHA_A = 2.1587
SALEH_BETA_A = 1.1517
SALEH_ALPHA_P = 4.0033
SALEH_BETA_P = 9.1040


@dataclass(frozen=True)
class HpaModel:
    """Memoryless nonlinearity defined by AM/AM and AM/PM curves.

    ``amam``/``ampm`` are callables on the input envelope r >= 0 returning
    output envelope and phase rotation [rad].  ``r_sat`` is the input
    envelope at which the output envelope peaks, ``p_sat`` the corresponding
    output power.  ``r_max`` bounds the valid input range for tabulated
    models (None means unbounded).
    """

    amam: object = field(repr=False)
    ampm: object = field(repr=False)
    r_sat: float
    p_sat: float
    r_max: float | None = None

    def transfer(self, x: np.ndarray) -> np.ndarray:
        """Apply the nonlinearity to complex baseband samples."""
        r = np.abs(x)
        if self.r_max is not None and np.any(r > self.r_max * (1 + 1e-12)):
            raise ValueError(
                f"input envelope {np.max(r):.4g} outside the tabulated range "
                f"(max {self.r_max:.4g}); extrapolation refused"
            )
        # gain referenced to the envelope; x = 0 maps to 0 regardless
        gain = self.amam(r) / np.maximum(r, 1e-300)
        return x * gain * np.exp(1j * self.ampm(r))


def saleh_hpa(
    alpha_a: float = SALEH_ALPHA_A,
    beta_a: float = SALEH_BETA_A,
    alpha_p: float = SALEH_ALPHA_P,
    beta_p: float = SALEH_BETA_P,
) -> HpaModel:
    """Saleh-model HPA: A(r) = a*r/(1+b*r^2), Phi(r) = c*r^2/(1+d*r^2)."""

    def amam(r):
        return alpha_a * r / (1 + beta_a * np.square(r))

    def ampm(r):
        return alpha_p * np.square(r) / (1 + beta_p * np.square(r))

    r_sat = 1.0 / np.sqrt(beta_a)
    p_sat = (alpha_a / (2 * np.sqrt(beta_a))) ** 2
    return HpaModel(amam=amam, ampm=ampm, r_sat=r_sat, p_sat=p_sat)


def tabulated_hpa(points) -> HpaModel:
    """HPA from (input_db, output_db, phase_deg) triplets.

    Monotone cubic interpolation in the envelope domain.  The AM/AM curve
    must be non-decreasing up to its maximum and non-increasing after it;
    inputs beyond the table range are refused at transfer time.
    """
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) < 3:
        raise ValueError("need at least 3 (input_db, output_db, phase_deg) rows")
    order = np.argsort(arr[:, 0])
    arr = arr[order]
    r_in = 10 ** (arr[:, 0] / 20.0)
    r_out = 10 ** (arr[:, 1] / 20.0)
    phase = np.deg2rad(arr[:, 2])

    k_sat = int(np.argmax(r_out))
    rising = np.diff(r_out[: k_sat + 1])
    falling = np.diff(r_out[k_sat:])
    if np.any(rising < -1e-12) or np.any(falling > 1e-12):
        raise ValueError(
            "AM/AM table must rise monotonically to saturation and not rise after it"
        )

    # anchor at the origin so amam(0) = 0
    r_in0 = np.concatenate(([0.0], r_in))
    r_out0 = np.concatenate(([0.0], r_out))
    phase0 = np.concatenate(([phase[0]], phase))
    amam = scipy.interpolate.PchipInterpolator(r_in0, r_out0, extrapolate=False)
    ampm = scipy.interpolate.PchipInterpolator(r_in0, phase0, extrapolate=False)

    def amam_f(r):
        return np.nan_to_num(amam(np.clip(r, 0, r_in[-1])))

    def ampm_f(r):
        return np.nan_to_num(ampm(np.clip(r, 0, r_in[-1])))

    return HpaModel(
        amam=amam_f,
        ampm=ampm_f,
        r_sat=float(r_in[k_sat]),
        p_sat=float(r_out[k_sat] ** 2),
        r_max=float(r_in[-1]),
    )


# ---------------------------------------------------------------------------
# Multiplexing filters
# ---------------------------------------------------------------------------


def _cheby_magnitude(f: np.ndarray, f3db: float, order: int, ripple_db: float):
    """Chebyshev type-I lowpass magnitude with an exact -3 dB point."""
    eps2 = 10 ** (ripple_db / 10.0) - 1.0
    # Chebyshev polynomial argument where |H|^2 = 1/2
    x3 = np.cosh(np.arccosh(np.sqrt(1.0 / eps2)) / order)
    x = np.abs(f) / f3db * x3

    t = np.where(
        x <= 1.0,
        np.cos(order * np.arccos(np.clip(x, -1, 1))),
        np.cosh(order * np.arccosh(np.maximum(x, 1.0))),
    )
    return 1.0 / np.sqrt(1.0 + eps2 * t**2)


def mux_filter_taps(
    bandwidth_3db: float,
    sample_rate: float,
    num_taps: int | None = None,
    order: int = 4,
    ripple_db: float = 0.3,
) -> np.ndarray:
    """Linear-phase FIR approximating a Chebyshev-like channel filter.

    ``bandwidth_3db`` is the two-sided -3 dB bandwidth [Hz].  Taps are real
    (symmetric lowpass prototype applied at the carrier's baseband).
    """
    if num_taps is None:
        num_taps = int(round(16 * sample_rate / bandwidth_3db)) | 1
    num_taps = int(num_taps) | 1
    freqs = np.linspace(0.0, sample_rate / 2, 512)
    gains = _cheby_magnitude(freqs, bandwidth_3db / 2.0, order, ripple_db)
    gains[-1] = 0.0
    taps = scipy.signal.firwin2(num_taps, freqs, gains, fs=sample_rate)
    return taps


@dataclass(frozen=True)
class TransponderSpec:
    """One transponder: IMUX -> HPA -> OMUX plus the drive level.

    ``imux_taps``/``omux_taps`` of None mean flat (bypassed) filters;
    ``hpa`` of None bypasses the amplifier (linear transponder).
    ``input_backoff_db`` is the mean input power backoff from r_sat^2.
    """

    hpa: HpaModel | None
    imux_taps: np.ndarray | None = None
    omux_taps: np.ndarray | None = None
    input_backoff_db: float = 0.0

    @property
    def p_sat(self) -> float:
        if self.hpa is None:
            raise ValueError("linear transponder has no saturated power point")
        return self.hpa.p_sat

    def drive_scale(self, mean_input_power: float) -> float:
        """Amplitude factor putting the mean drive at the configured backoff."""
        if self.hpa is None:
            return 1.0
        target = self.hpa.r_sat**2 * 10 ** (-self.input_backoff_db / 10.0)
        return float(np.sqrt(target / mean_input_power))


def default_transponder(
    sample_rate: float,
    f_ref: float,
    input_backoff_db: float = 3.0,
    imux_bw_factor: float = 1.0,
    omux_bw_factor: float = 1.1,
) -> TransponderSpec:
    """Saleh HPA between Chebyshev-like IMUX/OMUX filters sized to F_B."""
    return TransponderSpec(
        hpa=saleh_hpa(),
        imux_taps=mux_filter_taps(imux_bw_factor * f_ref, sample_rate),
        omux_taps=mux_filter_taps(omux_bw_factor * f_ref, sample_rate),
        input_backoff_db=input_backoff_db,
    )


def load_transponder_json(path, sample_rate: float, f_ref: float) -> TransponderSpec:
    """Load a transponder description from JSON.

    Expected keys: "hpa" ({"model": "saleh", optional coefficients} or
    {"model": "table", "points": [[in_db, out_db, phase_deg], ...]} or
    {"model": "bypass"}), optional "imux"/"omux" ({"bw_factor": x} or
    {"bypass": true}), optional "input_backoff_db".
    """
    with open(path) as fh:
        cfg = json.load(fh)
    return transponder_from_config(cfg, sample_rate, f_ref)


def transponder_from_config(cfg: dict, sample_rate: float, f_ref: float) -> TransponderSpec:
    hpa_cfg = cfg.get("hpa", {"model": "saleh"})
    model = hpa_cfg.get("model", "saleh")
    if model == "saleh":
        hpa = saleh_hpa(
            alpha_a=hpa_cfg.get("alpha_a", SALEH_ALPHA_A),
            beta_a=hpa_cfg.get("beta_a", SALEH_BETA_A),
            alpha_p=hpa_cfg.get("alpha_p", SALEH_ALPHA_P),
            beta_p=hpa_cfg.get("beta_p", SALEH_BETA_P),
        )
    elif model == "table":
        hpa = tabulated_hpa(hpa_cfg["points"])
    elif model == "bypass":
        hpa = None
    else:
        raise ValueError(f"unknown HPA model {model!r}")

    def taps_for(key, default_factor):
        sub = cfg.get(key, {})
        if sub.get("bypass", False):
            return None
        return mux_filter_taps(
            sub.get("bw_factor", default_factor) * f_ref,
            sample_rate,
            num_taps=sub.get("num_taps"),
            ripple_db=sub.get("ripple_db", 0.3),
        )

    return TransponderSpec(
        hpa=hpa,
        imux_taps=taps_for("imux", 1.0),
        omux_taps=taps_for("omux", 1.1),
        input_backoff_db=cfg.get("input_backoff_db", 3.0),
    )


# ---------------------------------------------------------------------------
# Chain operations
# ---------------------------------------------------------------------------


def _filt(x: np.ndarray, taps: np.ndarray | None) -> np.ndarray:
    if taps is None:
        return x
    return scipy.signal.fftconvolve(x, taps, mode="same")


def apply_transponder(buffer: SampleBuffer, spec: TransponderSpec) -> SampleBuffer:
    """Run one carrier (already at baseband) through IMUX -> HPA -> OMUX.

    The input must be centered on the carrier being amplified; adjacent
    carrier energy that leaks through the IMUX is amplified along with it.
    """
    x = _filt(buffer.samples, spec.imux_taps)
    if spec.hpa is not None:
        x = spec.hpa.transfer(x)
    x = _filt(x, spec.omux_taps)
    return SampleBuffer(samples=x, sample_rate=buffer.sample_rate,
                        center_offset=buffer.center_offset)


def mux_downlink(carriers, spacing: float) -> SampleBuffer:
    """Sum per-carrier buffers on the downlink grid.

    ``carriers`` is a centered list (odd length); element u goes to offset
    (u - (U-1)/2) * spacing.  All buffers must share rate and length.
    """
    n_users = len(carriers)
    if n_users % 2 == 0:
        raise ValueError("carrier list must have odd length (centered grid)")
    fs = carriers[0].sample_rate
    n = len(carriers[0].samples)
    for c in carriers:
        if c.sample_rate != fs or len(c.samples) != n:
            raise ValueError("carriers must share sample rate and length")
    if fs < n_users * spacing:
        raise ValueError(
            f"composite bandwidth {n_users * spacing:.3e} exceeds sample rate {fs:.3e}"
        )
    t = np.arange(n) / fs
    total = np.zeros(n, dtype=complex)
    half = (n_users - 1) // 2
    for u, c in enumerate(carriers):
        ell = u - half
        if ell == 0:
            total += c.samples
        else:
            total += c.samples * np.exp(2j * np.pi * ell * spacing * t)
    return SampleBuffer(samples=total, sample_rate=fs, center_offset=0.0)


def add_awgn(buffer: SampleBuffer, n0: float, rng: np.random.Generator) -> SampleBuffer:
    """Add complex white Gaussian noise with PSD 2*N0 [power/Hz]."""
    if n0 < 0:
        raise ValueError("N0 must be non-negative")
    n = len(buffer.samples)
    sigma = np.sqrt(n0 * buffer.sample_rate)
    noise = sigma * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return SampleBuffer(samples=buffer.samples + noise,
                        sample_rate=buffer.sample_rate,
                        center_offset=buffer.center_offset)


def measure_obo(spec: TransponderSpec, modulated: SampleBuffer, trim: int = 0) -> float:
    """Output backoff [dB]: saturated power over mean post-OMUX power."""
    p_out = modulated.mean_power(trim=trim)
    if p_out <= 0:
        raise ValueError("modulated buffer has zero power")
    return float(10 * np.log10(spec.p_sat / p_out))


def snr_from_budget(budget: "LinkBudget") -> float:
    """SNR = P_sat / (N0 * F), the waveform-independent link quality."""
    return budget.p_sat / (budget.n0 * budget.bandwidth)


@dataclass(frozen=True)
class LinkBudget:
    """Saturated power, noise density and allocated bandwidth of one link."""

    p_sat: float
    n0: float
    bandwidth: float

    def __post_init__(self):
        if min(self.p_sat, self.n0, self.bandwidth) <= 0:
            raise ValueError("link budget entries must be positive")


def n0_for_snr(snr_db: float, p_sat: float, bandwidth: float) -> float:
    """Noise density achieving a target P_sat/(N0*F) in dB."""
    return p_sat / (10 ** (snr_db / 10.0) * bandwidth)
