"""
Multicarrier waveform synthesis with time-frequency packing
===========================================================

Linear modulation of PSK/APSK symbols with root-raised-cosine pulses on a
grid of carriers spaced below the orthogonality limit.  The packing factors

    tau = T / T_B   (symbol spacing relative to the reference symbol time)
    nu  = F / F_B   (carrier spacing relative to the reference spacing)

are both <= 1 in packed operation; the synthesis accepts the resulting
inter-symbol and inter-carrier interference by construction.

Conventions
-----------
* Pulses are designed on the reference grid: a pulse with ``bandwidth_scale``
  w occupies a two-sided bandwidth w*(1+alpha)/T_B.  Packing transmits the
  same pulse every tau*T_B seconds.
* Pulse taps are stored in reference-normalized time (t in units of T_B)
  with unit energy on that grid; physical scaling by 1/sqrt(T_B) happens at
  synthesis time.
* The simulation rate is an integer number of samples per symbol interval,
  fs = samples_per_symbol / (tau*T_B), so every symbol epoch lands on a
  sample.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.signal

__all__ = [
    "Constellation",
    "PulseShape",
    "PackingGrid",
    "SampleBuffer",
    "build_constellation",
    "rrc_pulse",
    "synthesize_uplink",
    "compute_psd",
    "write_psd_csv",
]


# ---------------------------------------------------------------------------
# Constellations
# ---------------------------------------------------------------------------

# Ring layouts for the APSK alphabets: (points per ring, relative radius,
# phase offset of the first point on the ring).  Radii are relative to the
# innermost ring and are renormalized to unit average energy when the
# constellation is built.
_APSK_LAYOUTS = {
    "16APSK": ((4, 1.0, np.pi / 4), (12, 3.15, np.pi / 12)),
    "32APSK": ((4, 1.0, np.pi / 4), (12, 2.84, np.pi / 12), (16, 5.27, 0.0)),
    "64APSK": (
        (4, 1.0, np.pi / 4),
        (12, 2.2, np.pi / 12),
        (20, 3.6, np.pi / 20),
        (28, 5.2, np.pi / 28),
    ),
}

_PSK_SIZES = {"QPSK": 4, "8PSK": 8}


@dataclass(frozen=True)
class Constellation:
    """Unit-energy symbol alphabet with ring metadata.

    ``kind`` is "psk" for constant-modulus alphabets and "apsk" otherwise;
    several receiver paths branch on it because constant-modulus alphabets
    collapse the odd-order signal model to a single effective pulse.
    """

    label: str
    points: np.ndarray          # complex, unit average energy
    kind: str                   # "psk" | "apsk"
    ring_radii: np.ndarray      # distinct radii, ascending
    ring_index: np.ndarray      # ring of each point

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def bits_per_symbol(self) -> int:
        return int(round(np.log2(self.size)))


def build_constellation(label: str, ring_ratios=None) -> Constellation:
    """Build a named constellation, optionally overriding APSK ring ratios.

    Parameters
    ----------
    label : one of QPSK, 8PSK, 16APSK, 32APSK, 64APSK.
    ring_ratios : optional sequence of relative radii (innermost first) to
        replace the defaults of an APSK layout.  Must be positive and match
        the number of rings in the layout.
    """
    if label in _PSK_SIZES:
        if ring_ratios is not None:
            raise ValueError(f"{label} has a single ring; ring_ratios not accepted")
        m = _PSK_SIZES[label]
        phase0 = np.pi / 4 if label == "QPSK" else 0.0
        points = np.exp(1j * (2 * np.pi * np.arange(m) / m + phase0))
        return Constellation(
            label=label,
            points=points,
            kind="psk",
            ring_radii=np.array([1.0]),
            ring_index=np.zeros(m, dtype=int),
        )

    if label not in _APSK_LAYOUTS:
        raise ValueError(f"unknown constellation label {label!r}")

    layout = _APSK_LAYOUTS[label]
    if ring_ratios is not None:
        ring_ratios = [float(r) for r in ring_ratios]
        if len(ring_ratios) != len(layout):
            raise ValueError(
                f"{label} has {len(layout)} rings, got {len(ring_ratios)} ratios"
            )
        if any(r <= 0 for r in ring_ratios):
            raise ValueError("ring ratios must be positive")
        layout = tuple(
            (n, r, phi) for (n, _, phi), r in zip(layout, ring_ratios)
        )

    points = []
    rings = []
    for ring, (n, radius, phi) in enumerate(layout):
        points.append(radius * np.exp(1j * (2 * np.pi * np.arange(n) / n + phi)))
        rings.append(np.full(n, ring, dtype=int))
    points = np.concatenate(points)
    rings = np.concatenate(rings)

    # unit average energy
    scale = np.sqrt(np.mean(np.abs(points) ** 2))
    points = points / scale
    radii = np.array([r for (_, r, _) in layout]) / scale
    return Constellation(
        label=label, points=points, kind="apsk", ring_radii=radii, ring_index=rings
    )


# ---------------------------------------------------------------------------
# Root-raised-cosine pulse
# ---------------------------------------------------------------------------

# Truncation must keep at least this fraction of the (unit) pulse energy.
MIN_CONTAINED_ENERGY = 0.999


@dataclass(frozen=True)
class PulseShape:
    """Truncated unit-energy RRC pulse on the reference symbol grid.

    ``taps`` are samples at spacing 1/samples_per_symbol in reference time;
    ``bandwidth_scale`` stretches the spectrum (w knob), so the occupied
    two-sided bandwidth is bandwidth_scale*(1+alpha) on the reference grid.
    """

    alpha: float
    span_symbols: int
    samples_per_symbol: int
    bandwidth_scale: float
    taps: np.ndarray = field(repr=False)

    def sampled(self, spacing: float) -> np.ndarray:
        """Re-sample the pulse at an arbitrary spacing (in reference time).

        Used by the synthesis path when tau < 1: the stored taps sit on the
        tau = 1 grid, but a packed system samples the same continuous pulse
        at spacing tau/samples_per_symbol.  Unit energy on the new grid.
        """
        half = int(np.floor(self.span_symbols / (2.0 * self.bandwidth_scale) / spacing))
        t = np.arange(-half, half + 1) * spacing
        taps = _rrc_time(t * self.bandwidth_scale, self.alpha) * np.sqrt(
            self.bandwidth_scale
        )
        return taps / np.sqrt(np.sum(np.abs(taps) ** 2) * spacing)


def _rrc_time(t: np.ndarray, alpha: float) -> np.ndarray:
    """Closed-form unit-energy RRC impulse response at T = 1."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)

    # singularities: t = 0 and |t| = 1/(4 alpha)
    tiny = 1e-10
    at_zero = np.abs(t) < tiny
    if alpha > 0:
        at_quarter = np.abs(np.abs(t) - 1.0 / (4 * alpha)) < tiny
    else:
        at_quarter = np.zeros_like(at_zero)
    regular = ~(at_zero | at_quarter)

    tr = t[regular]
    num = np.sin(np.pi * tr * (1 - alpha)) + 4 * alpha * tr * np.cos(
        np.pi * tr * (1 + alpha)
    )
    den = np.pi * tr * (1 - (4 * alpha * tr) ** 2)
    out[regular] = num / den

    out[at_zero] = 1.0 - alpha + 4 * alpha / np.pi
    if alpha > 0 and np.any(at_quarter):
        out[at_quarter] = (alpha / np.sqrt(2)) * (
            (1 + 2 / np.pi) * np.sin(np.pi / (4 * alpha))
            + (1 - 2 / np.pi) * np.cos(np.pi / (4 * alpha))
        )
    return out


def rrc_pulse(
    alpha: float,
    span_symbols: int = 16,
    samples_per_symbol: int = 12,
    bandwidth_scale: float = 1.0,
) -> PulseShape:
    """Generate a truncated RRC pulse with optional bandwidth scaling.

    The continuous pulse is sqrt(w) * p(w*t) with p the unit-energy RRC for
    symbol time 1 and w = ``bandwidth_scale``; its spectrum occupies
    |f| <= w*(1+alpha)/2.  Taps are truncated to ``span_symbols`` intervals
    of the scaled pulse and renormalized to unit energy.

    Raises
    ------
    ValueError
        If alpha is outside [0, 1], span is below 8 symbols, or the span is
        too short to contain 99.9% of the pulse energy (slow sinc-like tails
        need a longer span; the message says how much energy was contained).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"roll-off alpha must be in [0, 1], got {alpha}")
    if span_symbols < 8:
        raise ValueError(f"span_symbols must be >= 8, got {span_symbols}")
    if bandwidth_scale <= 0:
        raise ValueError(f"bandwidth_scale must be positive, got {bandwidth_scale}")

    sps = int(samples_per_symbol)
    w = float(bandwidth_scale)
    # truncate at span/2 scaled-symbol intervals either side
    half = int(round(span_symbols * sps / 2.0))
    m = np.arange(-half, half + 1)
    # scaled time argument: t = m/(sps*w) in scaled-symbol units -> w*t = m/sps
    taps = _rrc_time(m / sps, alpha) * np.sqrt(w)
    dt = 1.0 / (sps * w)

    energy = np.sum(taps**2) * dt  # continuous pulse has unit energy
    if energy < MIN_CONTAINED_ENERGY:
        raise ValueError(
            f"span {span_symbols} contains only {energy:.6f} of the pulse energy "
            f"(needs >= {MIN_CONTAINED_ENERGY}); increase span_symbols"
        )

    # re-express on the reference grid (spacing 1/sps) and renormalize
    half_ref = int(np.floor(span_symbols * sps / (2.0 * w)))
    t_ref = np.arange(-half_ref, half_ref + 1) / sps
    taps_ref = _rrc_time(t_ref * w, alpha) * np.sqrt(w)
    taps_ref = taps_ref / np.sqrt(np.sum(taps_ref**2) / sps)
    return PulseShape(
        alpha=alpha,
        span_symbols=span_symbols,
        samples_per_symbol=sps,
        bandwidth_scale=w,
        taps=taps_ref,
    )


# ---------------------------------------------------------------------------
# Packing grid and sample buffers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PackingGrid:
    """Time-frequency packing configuration.

    tau and nu scale the reference symbol time T_B and carrier spacing F_B;
    the orthogonal DVB-like configuration is tau = nu = 1.
    """

    tau: float
    nu: float
    t_ref: float = 1.0 / 27.5e6     # reference symbol time T_B [s]
    f_ref: float = 41.5e6           # reference carrier spacing F_B [Hz]
    num_users: int = 5

    def __post_init__(self):
        if not 0 < self.tau <= 1.5:
            raise ValueError(f"tau out of range: {self.tau}")
        if not 0 < self.nu <= 1.5:
            raise ValueError(f"nu out of range: {self.nu}")
        if self.num_users < 1 or self.num_users % 2 == 0:
            raise ValueError(
                f"num_users must be odd and >= 1, got {self.num_users}"
            )

    @property
    def symbol_time(self) -> float:
        """Packed symbol interval T = tau * T_B [s]."""
        return self.tau * self.t_ref

    @property
    def symbol_rate(self) -> float:
        return 1.0 / self.symbol_time

    @property
    def carrier_spacing(self) -> float:
        """Packed carrier spacing F = nu * F_B [Hz]."""
        return self.nu * self.f_ref

    @property
    def user_offsets(self) -> np.ndarray:
        """Carrier indices ell, centered on zero (user 0 is the probe user)."""
        half = (self.num_users - 1) // 2
        return np.arange(-half, half + 1)

    @property
    def normalization(self) -> float:
        """F_B * T_B, the reference time-frequency product per symbol."""
        return self.f_ref * self.t_ref


@dataclass
class SampleBuffer:
    """Complex baseband samples with their rate and spectral center."""

    samples: np.ndarray
    sample_rate: float
    center_offset: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def mean_power(self, trim: int = 0) -> float:
        s = self.samples[trim : len(self.samples) - trim] if trim else self.samples
        return float(np.mean(np.abs(s) ** 2))


# Oversampling guard: the simulation rate must exceed the occupied band by
# this factor so spectral wrap-around stays out of the measured carriers.
BANDWIDTH_GUARD = 1.05


def occupied_bandwidth(grid: PackingGrid, pulse: PulseShape) -> float:
    """Two-sided occupied bandwidth of the composite uplink [Hz]."""
    per_carrier = pulse.bandwidth_scale * (1 + pulse.alpha) / grid.t_ref
    return (grid.num_users - 1) * grid.carrier_spacing + per_carrier


def modulate_single(
    symbols: np.ndarray, grid: PackingGrid, pulse: PulseShape
) -> np.ndarray:
    """Pulse-shape one user's symbols at samples_per_symbol per T.

    Returns the full convolution; symbol k peaks at sample
    k*sps + (ntaps-1)/2.  Physical amplitude scaling (1/sqrt(T_B)) included.
    """
    symbols = np.atleast_2d(np.asarray(symbols, dtype=complex))
    sps = pulse.samples_per_symbol
    taps = pulse.sampled(grid.tau / sps) / np.sqrt(grid.t_ref)
    n_users, k = symbols.shape
    train = np.zeros((n_users, (k - 1) * sps + 1), dtype=complex)
    train[:, ::sps] = symbols
    return scipy.signal.fftconvolve(train, taps[None, :], mode="full", axes=1)


def pulse_delay(pulse: PulseShape, grid: PackingGrid) -> int:
    """Sample index of symbol 0's peak in the modulated output."""
    taps = pulse.sampled(grid.tau / pulse.samples_per_symbol)
    return (len(taps) - 1) // 2


def synthesize_uplink(
    symbols: np.ndarray, grid: PackingGrid, pulse: PulseShape
) -> SampleBuffer:
    """Superimpose all users' pulse trains on the packed carrier grid.

    Parameters
    ----------
    symbols : complex array (num_users, K); row u carries user ell = u - (U-1)/2.
    grid, pulse : packing configuration and shaping pulse.

    Returns
    -------
    SampleBuffer at fs = samples_per_symbol / T, centered on carrier 0.

    Raises
    ------
    ValueError if the symbol matrix does not match the grid's user count or
    the occupied bandwidth exceeds the sample rate guard.
    """
    symbols = np.asarray(symbols, dtype=complex)
    if symbols.ndim != 2 or symbols.shape[0] != grid.num_users:
        raise ValueError(
            f"symbols must be ({grid.num_users}, K), got {symbols.shape}"
        )
    fs = pulse.samples_per_symbol / grid.symbol_time
    occ = occupied_bandwidth(grid, pulse)
    if fs < BANDWIDTH_GUARD * occ:
        raise ValueError(
            f"sample rate {fs:.3e} Hz below guard x occupied bandwidth "
            f"{occ:.3e} Hz; raise samples_per_symbol"
        )

    base = modulate_single(symbols, grid, pulse)
    n = base.shape[1]
    t = np.arange(n) / fs
    total = np.zeros(n, dtype=complex)
    for row, ell in enumerate(grid.user_offsets):
        if ell == 0:
            total += base[row]
        else:
            total += base[row] * np.exp(2j * np.pi * ell * grid.carrier_spacing * t)
    return SampleBuffer(samples=total, sample_rate=fs, center_offset=0.0)


# ---------------------------------------------------------------------------
# Spectral analysis
# ---------------------------------------------------------------------------


def compute_psd(buffer: SampleBuffer, resolution: float):
    """Welch power spectral density of a sample buffer.

    Parameters
    ----------
    buffer : input samples.
    resolution : target frequency resolution [Hz]; segment length is chosen
        as sample_rate / resolution.

    Returns
    -------
    (freqs, psd) : frequency axis [Hz] including the buffer's center offset,
        and two-sided spectral density [power/Hz], both ascending in f.

    Raises
    ------
    ValueError if the buffer is shorter than 10 segments at the requested
    resolution (the average would be too noisy to honor the density contract).
    """
    fs = buffer.sample_rate
    nperseg = int(round(fs / resolution))
    if nperseg < 8:
        raise ValueError(f"resolution {resolution} too coarse for fs {fs}")
    if len(buffer.samples) < 10 * nperseg:
        raise ValueError(
            f"buffer length {len(buffer.samples)} below 10 segments of "
            f"{nperseg} samples; lengthen the buffer or coarsen resolution"
        )
    freqs, psd = scipy.signal.welch(
        buffer.samples,
        fs=fs,
        window="hann",
        nperseg=nperseg,
        noverlap=nperseg // 2,
        detrend=False,
        return_onesided=False,
        scaling="density",
    )
    order = np.argsort(freqs)
    return freqs[order] + buffer.center_offset, psd[order]


def write_psd_csv(path, freqs: np.ndarray, psd: np.ndarray) -> None:
    """Write a PSD to CSV with columns frequency_hz, psd_db."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frequency_hz", "psd_db"])
        floor = np.max(psd) * 1e-30
        for f, p in zip(freqs, psd):
            writer.writerow([repr(float(f)), repr(float(10 * np.log10(max(p, floor))))])
