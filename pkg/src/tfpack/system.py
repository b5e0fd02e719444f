"""
End-to-end link simulation plumbing
===================================

Glue between the waveform synthesis and the transponder chain: one
LinkSpec describes constellation, pulse, packing grid and transponder;
the functions here run symbol matrices through the full multi-carrier
downlink or through a single-carrier chain (used for predistorter
training and nonlinear-model identification) and provide the matched
filter sampling shared by all receiver front ends.

Alignment convention: modulated streams place symbol k's peak at sample
k*sps + (ntaps-1)/2; all on-board filters are odd-length linear-phase
FIRs applied in "same" mode, so that alignment survives the chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .channel import TransponderSpec, add_awgn, apply_transponder, measure_obo, mux_downlink
from .waveform import Constellation, PackingGrid, PulseShape, SampleBuffer, modulate_single, pulse_delay

__all__ = [
    "LinkSpec",
    "drive_scale",
    "drive_scale_for",
    "simulate_downlink",
    "single_carrier_chain",
    "chain_response",
    "matched_filter_symbols",
    "packed_pulse_taps",
    "guard_symbols",
    "estimate_gain",
]


@dataclass(frozen=True)
class LinkSpec:
    """Everything needed to simulate one multi-carrier downlink."""

    constellation: Constellation
    pulse: PulseShape
    grid: PackingGrid
    transponder: TransponderSpec

    @property
    def sps(self) -> int:
        return self.pulse.samples_per_symbol

    @property
    def sample_rate(self) -> float:
        return self.sps / self.grid.symbol_time

    @property
    def is_linear(self) -> bool:
        t = self.transponder
        return t.hpa is None and t.imux_taps is None and t.omux_taps is None


def drive_scale_for(transponder: TransponderSpec, grid: PackingGrid) -> float:
    """Symbol scaling that puts the mean HPA drive at the configured backoff.

    A unit-energy pulse with unit-energy symbols has mean power 1/T, so the
    scale follows analytically from the grid; linear links are left at unit
    scale (their SNR is referenced to the transmitted power instead).
    """
    if transponder.hpa is None:
        return 1.0
    return transponder.drive_scale(1.0 / grid.symbol_time)


def drive_scale(link: LinkSpec) -> float:
    """Drive scaling of a full link spec (see :func:`drive_scale_for`)."""
    return drive_scale_for(link.transponder, link.grid)


def packed_pulse_taps(link: LinkSpec) -> np.ndarray:
    """Physical-amplitude pulse taps on the packed sampling grid."""
    taps = link.pulse.sampled(link.grid.tau / link.sps)
    return taps / np.sqrt(link.grid.t_ref)


def guard_symbols(link: LinkSpec, guard_factor: int = 4) -> int:
    """Edge symbols excluded from measurements (pulse and filter tails)."""
    return guard_factor * link.pulse.span_symbols


def simulate_downlink(
    link: LinkSpec,
    idx: np.ndarray,
    n0: float,
    rng: np.random.Generator | None,
    lut=None,
):
    """Simulate the full uplink/transponder/downlink for one symbol block.

    Parameters
    ----------
    idx : int array (num_users, K) of constellation point indices.
    n0 : downlink noise density parameter (PSD 2*N0); 0 disables noise.
    rng : generator for the noise (may be None when n0 = 0).
    lut : optional predistorter lookup applied to every user's stream.

    Returns
    -------
    dict with keys:
        "rx"      : received SampleBuffer (user 0 at spectral center)
        "sym0"    : sample index of symbol 0's peak
        "obo_db"  : measured output backoff of the center carrier (None for
                    linear links)
        "symbols" : the information symbols of user 0 (pre-predistortion)
    """
    grid, pulse = link.grid, link.pulse
    points = link.constellation.points
    idx = np.asarray(idx)
    if idx.shape[0] != grid.num_users:
        raise ValueError(f"idx must have {grid.num_users} rows, got {idx.shape[0]}")

    if lut is not None:
        from .predistort import apply_predistortion  # deferred: predistort imports here

        tx = np.stack([apply_predistortion(row, lut) for row in idx])
    else:
        tx = points[idx]
    tx = tx * drive_scale(link)

    base = modulate_single(tx, grid, pulse)
    fs = link.sample_rate
    n = base.shape[1]
    t = np.arange(n) / fs
    spacing = grid.carrier_spacing
    offsets = grid.user_offsets
    composite = np.zeros(n, dtype=complex)
    for row, ell in enumerate(offsets):
        composite += base[row] * np.exp(2j * np.pi * ell * spacing * t) if ell else base[row]

    obo_db = None
    if link.is_linear:
        # no band-selecting stage exists, so the per-carrier loop would
        # just replicate the composite once per user; the linear downlink
        # is the composite itself
        rx = SampleBuffer(composite, fs)
    else:
        carriers = []
        trim = pulse.span_symbols * link.sps
        for row, ell in enumerate(offsets):
            at_base = composite * np.exp(-2j * np.pi * ell * spacing * t) if ell else composite
            out = apply_transponder(SampleBuffer(at_base, fs), link.transponder)
            if ell == 0 and link.transponder.hpa is not None:
                obo_db = measure_obo(link.transponder, out, trim=min(trim, n // 4))
            carriers.append(out)
        rx = mux_downlink(carriers, spacing)
    if n0 > 0:
        rx = add_awgn(rx, n0, rng)
    return {
        "rx": rx,
        "sym0": pulse_delay(pulse, grid),
        "obo_db": obo_db,
        "symbols": points[idx[(grid.num_users - 1) // 2]],
    }


def chain_response(
    transponder: TransponderSpec,
    pulse: PulseShape,
    grid: PackingGrid,
    symbols: np.ndarray,
) -> np.ndarray:
    """Noiseless single-carrier transponder output for pre-scaled symbols.

    ``symbols`` may be (K,) or a batch (B, K) and must already carry the
    drive amplitude.  Returns arrays aligned like :func:`modulate_single`.
    """
    symbols = np.atleast_2d(np.asarray(symbols, dtype=complex))
    x = modulate_single(symbols, grid, pulse)
    if transponder.imux_taps is not None:
        x = scipy.signal.fftconvolve(x, transponder.imux_taps[None, :], mode="same", axes=1)
    if transponder.hpa is not None:
        x = transponder.hpa.transfer(x)
    if transponder.omux_taps is not None:
        x = scipy.signal.fftconvolve(x, transponder.omux_taps[None, :], mode="same", axes=1)
    return x


def single_carrier_chain(link: LinkSpec, symbols: np.ndarray) -> np.ndarray:
    """Noiseless single-carrier transponder output for given symbols.

    ``symbols`` may be (K,) or a batch (B, K); the drive scaling is applied
    here, so pass unit-power constellation points (or predistorted values).
    Returns arrays aligned like :func:`modulate_single`.
    """
    symbols = np.asarray(symbols, dtype=complex) * drive_scale(link)
    return chain_response(link.transponder, link.pulse, link.grid, symbols)


def matched_filter_symbols(
    rx: np.ndarray,
    filters: np.ndarray,
    sym0: int,
    sps: int,
    n_symbols: int,
    dt: float,
) -> np.ndarray:
    """Correlate against one or more centered filters and sample at kT.

    Parameters
    ----------
    rx : received samples (1-D).
    filters : (L,) single filter or (n_filt, L) bank, odd L, centered on the
        symbol peak.
    sym0 : sample index of symbol 0's peak in ``rx``.
    sps : samples per symbol.
    n_symbols : number of outputs.
    dt : sample period (the correlation approximates an integral).

    Returns (n_symbols,) or (n_symbols, n_filt) complex statistics.
    """
    filters = np.atleast_2d(filters)
    n_filt, flen = filters.shape
    if flen % 2 != 1:
        raise ValueError("matched filters must have odd length (centered)")
    ch = (flen - 1) // 2
    out = np.empty((n_symbols, n_filt), dtype=complex)
    centers = sym0 + np.arange(n_symbols) * sps
    pad_rx = np.pad(rx, (ch, ch + sps))
    for i in range(n_filt):
        full = scipy.signal.fftconvolve(pad_rx, np.conj(filters[i][::-1]))
        # rx index j maps to pad index j + ch; y_k = full[c_k + 2*ch]
        out[:, i] = full[centers + 2 * ch] * dt
    return out[:, 0] if n_filt == 1 else out


def estimate_gain(y: np.ndarray, x: np.ndarray) -> complex:
    """Least-squares complex gain <y, x> / <x, x> of a statistic."""
    num = np.vdot(x, y)
    den = np.vdot(x, x)
    if den == 0:
        raise ValueError("cannot estimate gain against all-zero symbols")
    return complex(num / den)
