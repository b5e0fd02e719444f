"""Dynamic data predistortion: a symbol-neighborhood lookup table.

Instead of shaping the waveform, the transmitter replaces each symbol by
a value that depends on the symbol and its l_p neighbors on either side,
so the table can pre-compensate both the AM/AM//AM/PM compression and
the intersymbol interference the transponder filters regrow.  The table
is trained off-line by damped fixed-point inversion of a simulated
single-carrier stream and applied as a sliding cyclic window lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.signal

from .channel import TransponderSpec
from .system import chain_response, drive_scale_for
from .waveform import Constellation, PackingGrid, PulseShape, pulse_delay

# training defaults: damped updates, hard iteration cap, movement tolerance
DAMPING = 0.25
MAX_ITERATIONS = 50
MOVE_TOL = 1e-4

# abort bound on any table entry's magnitude (unit-power symbol domain)
MAGNITUDE_CAP = 3.0


# ---------------------------------------------------------------------------
# lookup table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredistorterLut:
    """Trained mapping from symbol neighborhoods to transmit values.

    ``table`` is flat over all M^(2 l_p + 1) neighborhoods; the flat index
    is big-endian in time, earliest symbol most significant.  Entries live
    in the unit-power symbol domain (the drive scaling stays outside).
    """

    constellation: Constellation
    l_p: int
    table: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.l_p < 0:
            raise ValueError("neighborhood half-width l_p cannot be negative")
        m = self.constellation.size
        expected = m ** (2 * self.l_p + 1)
        if self.table.shape != (expected,):
            raise ValueError(
                f"table must hold {expected} entries for M={m}, l_p={self.l_p}; "
                f"got shape {self.table.shape}"
            )

    @property
    def width(self) -> int:
        return 2 * self.l_p + 1

    def mean_power(self) -> float:
        """Mean transmit power under i.u.d. symbols (uniform neighborhoods)."""
        return float(np.mean(np.abs(self.table) ** 2))


def _all_digits(m: int, width: int) -> np.ndarray:
    """(m^width, width) array of every digit tuple in flat-index order."""
    flat = np.arange(m**width)
    cols = [(flat // m**p) % m for p in range(width - 1, -1, -1)]
    return np.stack(cols, axis=1)


def identity_lut(constellation: Constellation, l_p: int) -> PredistorterLut:
    """The do-nothing table: every neighborhood maps to its center point."""
    m = constellation.size
    width = 2 * l_p + 1
    center = (_all_digits(m, width)[:, l_p]) if l_p > 0 else np.arange(m)
    return PredistorterLut(
        constellation=constellation,
        l_p=l_p,
        table=constellation.points[center].astype(complex),
    )


def apply_predistortion(symbols: np.ndarray, lut: PredistorterLut) -> np.ndarray:
    """Replace each symbol index by its neighborhood's table entry.

    ``symbols`` are constellation indices; the first and last l_p
    positions read their neighbors cyclically, so the map commutes with
    cyclic shifts of the block.
    """
    idx = np.asarray(symbols)
    m = lut.constellation.size
    if idx.ndim != 1:
        raise ValueError("symbol index sequence must be one-dimensional")
    if len(idx) < lut.width:
        raise ValueError(
            f"need at least {lut.width} symbols for l_p={lut.l_p} lookups"
        )
    if idx.min() < 0 or idx.max() >= m:
        raise ValueError(f"symbol indices must lie in [0, {m})")
    flat = np.zeros(len(idx), dtype=np.int64)
    for j in range(lut.width):
        # position j of the window holds symbol k - l_p + j
        flat = flat * m + np.roll(idx, lut.l_p - j)
    return lut.table[flat]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _stream_centers(spec, pulse, grid, tx):
    """Matched-filter sample at every symbol of one long stream."""
    sps = pulse.samples_per_symbol
    taps = pulse.sampled(grid.tau / sps) / np.sqrt(grid.t_ref)
    dt = grid.symbol_time / sps
    half = (len(taps) - 1) // 2
    y = chain_response(spec, pulse, grid, tx[None, :])[0]
    pad = np.pad(y, (half, half + sps))
    full = scipy.signal.fftconvolve(pad, np.conj(taps[::-1]))
    centers = pulse_delay(pulse, grid) + np.arange(len(tx)) * sps
    return full[centers + 2 * half] * dt


def train_predistorter(
    spec: TransponderSpec,
    pulse: PulseShape,
    grid: PackingGrid,
    constellation: Constellation,
    l_p: int,
    iterations: int = MAX_ITERATIONS,
    step_size: float = DAMPING,
    tol: float = MOVE_TOL,
    seed: int = 0,
    n_train: int | None = None,
    magnitude_cap: float = MAGNITUDE_CAP,
    progress: bool = False,
) -> PredistorterLut:
    """Fixed-point inversion of the amplifier's symbol-level distortion.

    The target of the inversion is the same transponder with the HPA
    bypassed: packing and filter ISI are left alone (the receiver models
    them), only the nonlinear residual is driven to zero.  Each sweep
    pushes one seeded random stream of ``n_train`` interior symbols
    through the chain with the current table applied, matched-filters
    every symbol, and moves each entry by the mean gain-corrected
    residual over that entry's occurrences, damped by ``step_size``.
    Training on a stream rather than on isolated neighborhoods keeps the
    amplifier at its in-service envelope statistics: with pulses many
    symbols long, most of the signal under any center sample comes from
    outside the table window.  Entries are renormalized to unit mean
    power after each sweep so the drive level stays an external knob,
    and clipped at the saturation input, beyond which the AM/AM curve is
    not invertible.  Stops when no entry moved more than ``tol`` or at
    the iteration cap.
    """
    if l_p not in (0, 1, 2):
        raise ValueError("neighborhood half-width l_p must be 0, 1 or 2")
    if iterations < 1:
        raise ValueError("iterations must be positive")
    if not 0 < step_size <= 1:
        raise ValueError("step_size must lie in (0, 1]")

    m = constellation.size
    width = 2 * l_p + 1
    n_tuples = m**width
    if n_train is None:
        n_train = max(1 << 16, 48 * n_tuples)
    if n_train < 1:
        raise ValueError("n_train must be positive")
    scale = drive_scale_for(spec, grid)

    r_clip = np.inf if spec.hpa is None else spec.hpa.r_sat / scale
    cap = magnitude_cap
    if spec.hpa is not None and spec.hpa.r_max is not None:
        cap = min(cap, spec.hpa.r_max / scale)

    # one fixed stream for the whole training run; the first and last
    # span worth of symbols only provide context and collect no updates
    guard = pulse.span_symbols
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, m, size=n_train + 2 * guard)
    flat = np.zeros(len(idx), dtype=np.int64)
    for j in range(width):
        flat = flat * m + np.roll(idx, l_p - j)
    keep = slice(guard, guard + n_train)

    # what a distortion-free transponder delivers for the raw symbols,
    # and its symbol-to-center-sample gain to express residuals in the
    # symbol domain
    wanted = _stream_centers(
        replace(spec, hpa=None), pulse, grid, constellation.points[idx]
    )
    raw = constellation.points[idx][keep]
    g_ref = np.vdot(raw, wanted[keep]) / np.vdot(raw, raw)

    table = identity_lut(constellation, l_p).table.copy()
    counts = np.zeros(n_tuples)
    accum = np.zeros(n_tuples, dtype=complex)
    for it in range(iterations):
        samples = _stream_centers(spec, pulse, grid, table[flat] * scale)
        gain = np.vdot(wanted[keep], samples[keep]) / np.vdot(
            wanted[keep], wanted[keep]
        )
        resid = (wanted[keep] - samples[keep] / gain) / g_ref
        accum[:] = 0.0
        counts[:] = 0.0
        np.add.at(accum, flat[keep], resid)
        np.add.at(counts, flat[keep], 1.0)
        mean_resid = np.where(counts > 0, accum / np.maximum(counts, 1.0), 0.0)

        new = table + step_size * mean_resid
        new /= np.sqrt(np.mean(np.abs(new) ** 2))
        # clipped at the saturation input: asking the amplifier for more
        # output past its peak only feeds back into runaway growth
        mags = np.abs(new)
        over = mags > r_clip
        if np.any(over):
            new[over] *= r_clip / mags[over]

        worst = int(np.argmax(np.abs(new)))
        if np.abs(new[worst]) > cap:
            tup = tuple(int(worst // m**p) % m for p in range(width - 1, -1, -1))
            raise ValueError(
                f"predistorter diverged at tuple {tup}: entry magnitude "
                f"{np.abs(new[worst]):.3f} exceeds the bound {cap:.3f}"
            )
        move = float(np.max(np.abs(new - table)))
        table = new
        if progress and (it + 1) % 10 == 0:
            print(f"[predistort] sweep {it + 1}: max movement {move:.2e}")
        if move < tol:
            break

    return PredistorterLut(constellation=constellation, l_p=l_p, table=table)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def center_sample_errors(
    lut: PredistorterLut,
    spec: TransponderSpec,
    pulse: PulseShape,
    grid: PackingGrid,
    n_symbols: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gain-corrected nonlinear residuals on a fresh random stream.

    Simulates one single-carrier block through the chain with the table
    applied and matched-filters every symbol, then does the same for the
    raw symbols through the distortion-free chain (HPA bypassed).  The
    deliberate packing and filter interference appears in both, so after
    removing the least-squares complex gain the returned interior errors
    isolate the nonlinear distortion the table is meant to cancel; their
    mean squared magnitude is the center-sample MSE.
    """
    if n_symbols < 1:
        raise ValueError("n_symbols must be positive")
    m = lut.constellation.size
    guard = pulse.span_symbols
    total = n_symbols + 2 * guard
    idx = rng.integers(0, m, size=total)

    tx = apply_predistortion(idx, lut) * drive_scale_for(spec, grid)
    samples = _stream_centers(spec, pulse, grid, tx)
    wanted = _stream_centers(
        replace(spec, hpa=None), pulse, grid, lut.constellation.points[idx]
    )

    keep = slice(guard, guard + n_symbols)
    x, yk = wanted[keep], samples[keep]
    gain = np.vdot(x, yk) / np.vdot(x, x)
    return yk / gain - x


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_lut_csv(path, lut: PredistorterLut) -> None:
    """Flat table as index,real,imag rows at full precision."""
    with open(path, "w") as fh:
        fh.write("index,real,imag\n")
        for i, v in enumerate(lut.table):
            fh.write(f"{i},{float(v.real)!r},{float(v.imag)!r}\n")


def load_lut_csv(path, constellation: Constellation) -> PredistorterLut:
    """Rebuild a table; l_p is inferred from the row count."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "index,real,imag":
            raise ValueError(f"unexpected LUT header {header!r}")
        for line in fh:
            i, re, im = line.strip().split(",")
            rows.append((int(i), float(re), float(im)))
    rows.sort()
    table = np.array([re + 1j * im for _, re, im in rows])
    m = constellation.size
    width = round(np.log(len(table)) / np.log(m))
    if m**width != len(table) or width % 2 == 0:
        raise ValueError(
            f"table length {len(table)} is not an odd power of M={m}"
        )
    return PredistorterLut(
        constellation=constellation, l_p=(width - 1) // 2, table=table
    )
