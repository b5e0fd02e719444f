"""
Diagonal Volterra model of the transponder chain
================================================

The single-carrier chain (pulse shaping, IMUX, HPA, OMUX) is approximated
by a bank of odd-order kernels acting on per-symbol self terms only:

    s(t) ~= sum_n sum_i x_n |x_n|^(2i) h_(2i+1)(t - n T),   0 <= i < (v+1)/2

Cross-epoch nonlinear products are deliberately left in the model error;
the reported residual measures them.  The detection layers treat this model
as the truth, so everything downstream (matched filter banks, Gram blocks,
noise laws) derives from the kernels identified here.

Two probe styles
----------------
* A circular Gaussian probe excites a continuum of amplitudes, which keeps
  the order streams x|x|^(2i) linearly independent; this is the default and
  yields the canonical order-basis kernel set.
* A constellation probe fits one kernel per amplitude ring instead.  On a
  discrete constellation the order streams collapse onto the ring streams
  (only R = #rings distinct amplitudes exist), so the ring fit is always
  well posed and is what the detectors use.  Order kernels are recovered by
  solving the ring/order Vandermonde relation for the lowest orders.

Identification is plain least squares on the simulated chain output.  The
symbol-rate structure of the model makes the normal equations decouple by
sample phase, so each phase is a small multichannel FIR fit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .channel import TransponderSpec
from .system import chain_response, drive_scale_for, matched_filter_symbols
from .waveform import Constellation, PackingGrid, PulseShape, SampleBuffer, pulse_delay

__all__ = [
    "VolterraKernelSet",
    "GramSequence",
    "identify_kernels",
    "matched_filter_bank",
    "gram_from_kernels",
    "reconstruct",
    "model_residual",
    "save_kernel_set",
    "load_kernel_set",
]

# effective channel memory: lags whose Gram norm falls below this fraction
# of the zero-lag norm are treated as zero
MEMORY_THRESHOLD = 1e-4


@dataclass(frozen=True)
class VolterraKernelSet:
    """Identified odd-order kernels of the diagonal model.

    ``kernels`` holds (v+1)/2 centered odd-length responses on the simulator
    grid (order 2i+1 in row i), at physical amplitude including the drive
    scale.  When the set was fitted against a constellation probe the
    per-ring responses are kept as well: they are an exact reparameterization
    of the model on that constellation and stay well conditioned even when
    the order basis is rank deficient (fewer rings than kernels).
    """

    order: int
    kernels: np.ndarray
    dt: float
    sps: int
    residual_rel: float
    ring_radii: np.ndarray | None = None
    ring_kernels: np.ndarray | None = None

    @property
    def n_kernels(self) -> int:
        return (self.order + 1) // 2

    @property
    def n_taps(self) -> int:
        return self.kernels.shape[1]

    def combined(self) -> np.ndarray:
        """h_bar(t) = sum of all order kernels (the unit-ring response)."""
        return self.kernels.sum(axis=0)

    def energies(self) -> np.ndarray:
        """Energy of each order kernel."""
        return np.sum(np.abs(self.kernels) ** 2, axis=1) * self.dt


@dataclass(frozen=True)
class GramSequence:
    """Inner products g_m between kernel translates at symbol lags.

    ``blocks[m]`` is the d x d matrix g_m for lag m >= 0 (d = 1 collapses to
    the scalar sequence); negative lags follow from Hermitian symmetry
    g_{-m} = g_m^H.  ``memory`` is the smallest L such that every lag beyond
    it is negligible against g_0.
    """

    blocks: np.ndarray
    memory: int

    @property
    def dim(self) -> int:
        return self.blocks.shape[1]

    @property
    def max_lag(self) -> int:
        return self.blocks.shape[0] - 1

    def block(self, m: int) -> np.ndarray:
        m = int(m)
        if abs(m) > self.max_lag:
            return np.zeros((self.dim, self.dim), dtype=complex)
        if m >= 0:
            return self.blocks[m]
        return self.blocks[-m].conj().T

    def scalar(self) -> np.ndarray:
        """1-D view g_0..g_maxlag (only for dim = 1)."""
        if self.dim != 1:
            raise ValueError("scalar() needs a 1-dimensional Gram sequence")
        return self.blocks[:, 0, 0]

    def toeplitz(self, n: int) -> np.ndarray:
        """Dense (n*d, n*d) block-Toeplitz section of the implied matrix."""
        d = self.dim
        out = np.zeros((n * d, n * d), dtype=complex)
        for r in range(n):
            for c in range(n):
                out[r * d : (r + 1) * d, c * d : (c + 1) * d] = self.block(r - c)
        return out

    def spectrum(self, nfft: int) -> np.ndarray:
        """G(omega) = sum_m g_m e^{-j omega m} on an nfft grid, shape (nfft, d, d)."""
        d = self.dim
        out = np.zeros((nfft, d, d), dtype=complex)
        w = 2 * np.pi * np.arange(nfft) / nfft
        for m in range(self.max_lag + 1):
            ph = np.exp(-1j * w * m)
            if m == 0:
                out += self.blocks[0][None, :, :]
            else:
                out += ph[:, None, None] * self.blocks[m][None, :, :]
                out += np.conj(ph)[:, None, None] * self.blocks[m].conj().T[None, :, :]
        return out


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------


def _fit_streams(streams, y_aligned, sps, reach, margin, max_condition):
    """Least-squares fit of one centered kernel per driving stream.

    streams : (S, K) symbol-rate sequences.
    y_aligned : chain output samples with symbol n's peak at index n*sps.
    reach : kernel half-support in whole symbols (taps cover +-reach*sps).

    Returns (kernels (S, 2*reach*sps+1), relative rms residual).  The model
    is symbol-spaced, so the least-squares problem splits by sample phase:
    phase 0 sees lags -reach..reach, the other phases -reach..reach-1.
    """
    streams = np.asarray(streams)
    S, K = streams.shape
    rows = np.arange(margin, K - margin)
    if len(rows) < 4 * S * (2 * reach + 1):
        raise ValueError("probe too short for the requested kernel support")

    # design columns: lag k runs -reach..reach; column c of stream j holds
    # s_j[n - (c - reach)] over the interior rows n
    win = np.lib.stride_tricks.sliding_window_view(streams, 2 * reach + 1, axis=1)
    blocks = win[:, rows - reach, ::-1]                  # (S, N, 2*reach+1)
    x_full = np.concatenate(list(blocks), axis=1)        # (N, S*(2*reach+1))
    keep_b = np.concatenate(
        [np.arange(2 * reach) + j * (2 * reach + 1) for j in range(S)]
    )
    x_part = x_full[:, keep_b]                           # lags -reach..reach-1

    targets = y_aligned[rows[:, None] * sps + np.arange(sps)[None, :]]

    sol_full, _, _, sv = np.linalg.lstsq(x_full, targets[:, :1], rcond=None)
    cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
    if cond > max_condition:
        raise ValueError(
            f"normal equations ill conditioned (cond {cond:.2e}); "
            "request a longer probe"
        )
    if sps > 1:
        sol_part = np.linalg.lstsq(x_part, targets[:, 1:], rcond=None)[0]

    half = reach * sps
    kernels = np.zeros((S, 2 * half + 1), dtype=complex)
    ks = np.arange(-reach, reach + 1)
    for j in range(S):
        kernels[j, ks * sps + half] = sol_full[j * (2 * reach + 1) : (j + 1) * (2 * reach + 1), 0]
        if sps > 1:
            coef = sol_part[j * 2 * reach : (j + 1) * 2 * reach]
            for c, k in enumerate(range(-reach, reach)):
                kernels[j, k * sps + np.arange(1, sps) + half] = coef[c]

    pred = np.empty_like(targets)
    pred[:, :1] = x_full @ sol_full
    if sps > 1:
        pred[:, 1:] = x_part @ sol_part
    num = np.sum(np.abs(targets - pred) ** 2)
    den = np.sum(np.abs(targets) ** 2)
    return kernels, float(np.sqrt(num / den))


def _order_streams(symbols: np.ndarray, n_orders: int) -> np.ndarray:
    mag2 = np.abs(symbols) ** 2
    return np.stack([symbols * mag2**i for i in range(n_orders)])


def _ring_streams(symbols: np.ndarray, radii: np.ndarray) -> np.ndarray:
    r = np.abs(symbols)
    idx = np.argmin(np.abs(r[None, :] - radii[:, None]), axis=0)
    return np.where(idx[None, :] == np.arange(len(radii))[:, None], symbols, 0.0)


def _orders_from_rings(ring_kernels, radii, n_orders):
    """Solve q_j = sum_i radii_j^(2i) h_i for the lowest identifiable orders.

    Uses only the first min(R, n_orders) orders so that a linear chain maps
    to a pure first-order kernel; higher orders stay exactly zero.
    """
    R = len(radii)
    m = min(R, n_orders)
    v = np.vander(radii**2, m, increasing=True)          # (R, m)
    coef, *_ = np.linalg.lstsq(v, np.eye(R), rcond=None)  # (m, R)
    kernels = np.zeros((n_orders, ring_kernels.shape[1]), dtype=complex)
    kernels[:m] = coef @ ring_kernels
    return kernels


def identify_kernels(
    spec: TransponderSpec,
    pulse: PulseShape,
    grid: PackingGrid,
    v: int,
    probe_len: int,
    rng: np.random.Generator,
    kernel_span: int = 16,
    constellation: Constellation | None = None,
    dominance_floor: float = 0.5,
    max_condition: float = 1e8,
) -> VolterraKernelSet:
    """Fit the diagonal model to the simulated single-carrier chain.

    Parameters
    ----------
    v : odd model order <= 7; (v+1)/2 kernels are fitted.
    probe_len : probe length in symbols; must be at least 100x the number
        of unknown taps.
    kernel_span : kernel support in symbol intervals (taps span +-span/2).
    constellation : fit per-ring kernels driven by random points of this
        constellation instead of the Gaussian probe (detection front ends
        want this; the order kernels are then derived from the rings).
    dominance_floor : minimum fraction of total kernel energy required in
        the first-order kernel.

    Raises ValueError on a too-short probe, ill conditioning, or when the
    first-order kernel no longer dominates.
    """
    if v % 2 != 1 or not 1 <= v <= 7:
        raise ValueError("model order v must be odd and between 1 and 7")
    n_orders = (v + 1) // 2
    sps = pulse.samples_per_symbol
    reach = kernel_span // 2
    n_taps = 2 * reach * sps + 1

    if constellation is None:
        n_streams = n_orders
    else:
        n_streams = len(constellation.ring_radii)
    if probe_len < 100 * n_streams * n_taps:
        raise ValueError(
            f"probe_len {probe_len} below 100x the unknown tap count "
            f"({100 * n_streams * n_taps}); request a longer probe"
        )

    if constellation is None:
        probe = (rng.standard_normal(probe_len) + 1j * rng.standard_normal(probe_len))
        probe /= np.sqrt(2.0)
        streams = _order_streams(probe, n_orders)
    else:
        probe = constellation.points[rng.integers(0, constellation.size, probe_len)]
        streams = _ring_streams(probe, constellation.ring_radii)

    scale = drive_scale_for(spec, grid)
    y = chain_response(spec, pulse, grid, scale * probe)[0]
    delay = pulse_delay(pulse, grid)
    margin = -(-delay // sps) + reach + 1

    fitted, residual = _fit_streams(
        streams, y[delay:], sps, reach, margin, max_condition
    )

    dt = grid.symbol_time / sps
    if constellation is None:
        kernels = fitted
        ring_radii = None
        ring_kernels = None
    else:
        ring_radii = constellation.ring_radii
        ring_kernels = fitted
        kernels = _orders_from_rings(fitted, ring_radii, n_orders)

    energies = np.sum(np.abs(kernels) ** 2, axis=1) * dt
    total = energies.sum()
    if total <= 0 or energies[0] / total < dominance_floor:
        raise ValueError(
            f"first-order kernel holds {energies[0] / max(total, 1e-300):.3f} "
            f"of the energy, below the floor {dominance_floor}"
        )

    return VolterraKernelSet(
        order=v,
        kernels=kernels,
        dt=dt,
        sps=sps,
        residual_rel=residual,
        ring_radii=ring_radii,
        ring_kernels=ring_kernels,
    )


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def _stuff_and_filter(streams: np.ndarray, kernels: np.ndarray, sps: int) -> np.ndarray:
    """sum_j streams_j (zero-stuffed) convolved with kernels_j, full mode."""
    S, K = streams.shape
    train = np.zeros((S, (K - 1) * sps + 1), dtype=complex)
    train[:, ::sps] = streams
    out = scipy.signal.fftconvolve(train, kernels, mode="full", axes=1)
    return out.sum(axis=0)


def reconstruct(
    kernel_set: VolterraKernelSet, symbols: np.ndarray, basis: str = "auto"
) -> np.ndarray:
    """Model prediction of the chain output for a symbol sequence.

    ``basis`` picks the representation: "order" uses the x|x|^(2i) streams,
    "ring" the per-ring streams (requires a constellation fit), "combined"
    collapses everything onto h_bar (valid for constant-envelope symbols),
    and "auto" prefers rings when available.  Symbol n's peak lands at
    sample n*sps + (n_taps-1)/2, like the modulator.
    """
    symbols = np.asarray(symbols, dtype=complex)
    if basis == "auto":
        basis = "ring" if kernel_set.ring_kernels is not None else "order"
    if basis == "order":
        streams = _order_streams(symbols, kernel_set.n_kernels)
        kernels = kernel_set.kernels
    elif basis == "ring":
        if kernel_set.ring_kernels is None:
            raise ValueError("kernel set carries no ring decomposition")
        streams = _ring_streams(symbols, kernel_set.ring_radii)
        kernels = kernel_set.ring_kernels
    elif basis == "combined":
        streams = symbols[None, :]
        kernels = kernel_set.combined()[None, :]
    else:
        raise ValueError(f"unknown basis {basis!r}")
    return _stuff_and_filter(streams, kernels, kernel_set.sps)


def model_residual(
    kernel_set: VolterraKernelSet,
    spec: TransponderSpec,
    pulse: PulseShape,
    grid: PackingGrid,
    symbols: np.ndarray,
    basis: str = "auto",
) -> float:
    """Relative rms error of the model against the true chain on ``symbols``."""
    symbols = np.asarray(symbols, dtype=complex)
    scale = drive_scale_for(spec, grid)
    truth = chain_response(spec, pulse, grid, scale * symbols)[0]
    pred = reconstruct(kernel_set, symbols, basis=basis)

    sps = kernel_set.sps
    d_truth = pulse_delay(pulse, grid)
    d_pred = (kernel_set.n_taps - 1) // 2
    marg = -(-d_truth // sps) + (kernel_set.n_taps - 1) // (2 * sps) + 1
    k = len(symbols)
    lo, hi = marg * sps, (k - 1 - marg) * sps
    t = truth[d_truth + lo : d_truth + hi]
    p = pred[d_pred + lo : d_pred + hi]
    return float(np.sqrt(np.sum(np.abs(t - p) ** 2) / np.sum(np.abs(t) ** 2)))


# ---------------------------------------------------------------------------
# matched filter bank and Gram blocks
# ---------------------------------------------------------------------------


def _bank_filters(kernel_set: VolterraKernelSet, constellation_kind: str) -> np.ndarray:
    if constellation_kind == "psk":
        return kernel_set.combined()[None, :]
    if constellation_kind == "apsk":
        return kernel_set.kernels
    raise ValueError(f"unknown constellation kind {constellation_kind!r}")


def matched_filter_bank(
    rx: SampleBuffer,
    kernel_set: VolterraKernelSet,
    constellation_kind: str,
    grid: PackingGrid,
    sym0: int,
    n_symbols: int,
) -> np.ndarray:
    """T-spaced outputs of filters matched to the model kernels.

    PSK uses the single combined response h_bar; APSK keeps one stream per
    kernel.  ``sym0`` is the sample index of symbol 0's peak: the front end
    relies on the simulator's known timing, so a fractional sample offset
    is refused rather than approximated.
    """
    if sym0 != int(sym0):
        raise ValueError("sample-phase misalignment: sym0 must be an integer sample")
    expected = 1.0 / kernel_set.dt
    if abs(rx.sample_rate - expected) > 0.5 * expected / kernel_set.sps:
        raise ValueError(
            "sample-phase misalignment: buffer rate "
            f"{rx.sample_rate:.6g} does not match the kernel grid {expected:.6g}"
        )
    filters = _bank_filters(kernel_set, constellation_kind)
    out = matched_filter_symbols(
        rx.samples, filters, int(sym0), kernel_set.sps, n_symbols, kernel_set.dt
    )
    return out


def gram_blocks_from_filters(filters: np.ndarray, sps: int, dt: float) -> np.ndarray:
    """g_m[a, b] = integral h_b(t) h_a*(t - mT) dt for m = 0..reach."""
    filters = np.atleast_2d(filters)
    d, n = filters.shape
    max_lag = (n - 1) // sps
    blocks = np.zeros((max_lag + 1, d, d), dtype=complex)
    for m in range(max_lag + 1):
        shift = m * sps
        seg_b = filters[:, shift:]
        seg_a = filters[:, : n - shift]
        # [a, b] = sum_u conj(h_a[u]) h_b[u + shift]
        blocks[m] = np.conj(seg_a) @ seg_b.T * dt
    blocks[0] = 0.5 * (blocks[0] + blocks[0].conj().T)
    return blocks


def effective_memory(blocks: np.ndarray, threshold: float = MEMORY_THRESHOLD) -> int:
    norms = np.linalg.norm(blocks, axis=(1, 2))
    above = np.flatnonzero(norms >= threshold * norms[0])
    return int(above.max()) if len(above) else 0


def gram_from_kernels(
    kernel_set: VolterraKernelSet,
    grid: PackingGrid,
    constellation_kind: str,
) -> GramSequence:
    """Gram sequence of the matched-filter bank statistics.

    Scalar for PSK (bank = h_bar), (v+1)/2-dimensional blocks for APSK.
    ``memory`` is the effective ISI extent under the truncation threshold.
    """
    filters = _bank_filters(kernel_set, constellation_kind)
    blocks = gram_blocks_from_filters(filters, kernel_set.sps, kernel_set.dt)
    return GramSequence(blocks=blocks, memory=effective_memory(blocks))


def ring_gram(kernel_set: VolterraKernelSet) -> GramSequence:
    """Gram sequence of the per-ring bank (detection-side representation)."""
    if kernel_set.ring_kernels is None:
        raise ValueError("kernel set carries no ring decomposition")
    blocks = gram_blocks_from_filters(
        kernel_set.ring_kernels, kernel_set.sps, kernel_set.dt
    )
    return GramSequence(blocks=blocks, memory=effective_memory(blocks))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_kernel_set(path, kernel_set: VolterraKernelSet, metadata: dict | None = None):
    """Write a kernel set (with free-form metadata) to an .npz archive."""
    payload = {
        "order": kernel_set.order,
        "kernels": kernel_set.kernels,
        "dt": kernel_set.dt,
        "sps": kernel_set.sps,
        "residual_rel": kernel_set.residual_rel,
        "metadata_json": json.dumps(metadata or {}, sort_keys=True),
    }
    if kernel_set.ring_radii is not None:
        payload["ring_radii"] = kernel_set.ring_radii
        payload["ring_kernels"] = kernel_set.ring_kernels
    np.savez(path, **payload)


def load_kernel_set(path):
    """Read back a kernel set; returns (VolterraKernelSet, metadata dict)."""
    with np.load(path, allow_pickle=False) as data:
        ks = VolterraKernelSet(
            order=int(data["order"]),
            kernels=data["kernels"],
            dt=float(data["dt"]),
            sps=int(data["sps"]),
            residual_rel=float(data["residual_rel"]),
            ring_radii=data["ring_radii"] if "ring_radii" in data else None,
            ring_kernels=data["ring_kernels"] if "ring_kernels" in data else None,
        )
        meta = json.loads(str(data["metadata_json"]))
    return ks, meta
