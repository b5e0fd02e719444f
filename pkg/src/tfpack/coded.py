"""Desk-scale coded links: LDPC stand-in codes and the turbo receiver.

The code is a regular column-weight-3 LDPC at short block lengths with a
documented pseudo-random parity structure, standing in for the much
longer broadcast codes the operating points assume.  Decoding plugs into
a global detector/decoder loop exchanging extrinsic bit information
through a fixed pseudo-random interleaver, with Gray (PSK) or quasi-Gray
ring (APSK) bit labeling in between.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .detect import bcjr_detect, memoryless_detect
from .channel import TransponderSpec, default_transponder
from .inforate import DetectorFamily, build_chain, family_aux, noise_density
from .system import (
    LinkSpec,
    guard_symbols,
    matched_filter_symbols,
    simulate_downlink,
)
from .waveform import Constellation, PackingGrid, build_constellation, rrc_pulse

# supported desk-scale block lengths
CODE_LENGTHS = (1008, 4032)

# every variable node has this many parity checks
VAR_DEGREE = 3

# saturation for exchanged log-likelihood ratios
LLR_CAP = 40.0

# fixed construction seeds so shipped artifacts are reproducible
DEFAULT_CODE_SEED = 20260823
DEFAULT_INTERLEAVER_SEED = 1150509

WILSON_Z = 1.96


# ---------------------------------------------------------------------------
# GF(2) linear algebra on bit-packed rows
# ---------------------------------------------------------------------------


def _pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack (m, n) 0/1 rows into (m, ceil(n/64)) uint64 words."""
    m, n = bits.shape
    words = -(-n // 64)
    pad = np.zeros((m, words * 64), dtype=np.uint64)
    pad[:, :n] = bits
    shifts = np.arange(64, dtype=np.uint64)
    return np.bitwise_or.reduce(pad.reshape(m, words, 64) << shifts, axis=2)


def _unpack_rows(packed: np.ndarray, n: int) -> np.ndarray:
    m, words = packed.shape
    shifts = np.arange(64, dtype=np.uint64)
    bits = (packed[:, :, None] >> shifts) & np.uint64(1)
    return bits.reshape(m, words * 64)[:, :n].astype(np.uint8)


def _gf2_rref(bits: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Reduced row echelon form over GF(2); returns (rref, pivot columns)."""
    m, n = bits.shape
    packed = _pack_rows(bits)
    pivots = []
    r = 0
    for col in range(n):
        if r == m:
            break
        w, b = divmod(col, 64)
        colbits = (packed[:, w] >> np.uint64(b)) & np.uint64(1)
        below = np.nonzero(colbits[r:])[0]
        if len(below) == 0:
            continue
        p = r + int(below[0])
        if p != r:
            packed[[r, p]] = packed[[p, r]]
            colbits = (packed[:, w] >> np.uint64(b)) & np.uint64(1)
        mask = colbits.astype(bool)
        mask[r] = False
        packed[mask] ^= packed[r]
        pivots.append(col)
        r += 1
    return _unpack_rows(packed, n), pivots


# ---------------------------------------------------------------------------
# LDPC construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LdpcCode:
    """Regular column-weight-3 parity structure with a systematic encoder.

    ``check_index``/``var_index`` list the Tanner graph edges.  Encoding
    places the message on ``message_cols`` and solves the pivots:
    codeword[parity_cols] = parity_map @ message (mod 2).
    """

    n: int
    n_checks: int
    rate: Fraction
    seed: int
    check_index: np.ndarray = field(repr=False)
    var_index: np.ndarray = field(repr=False)
    message_cols: np.ndarray = field(repr=False)
    parity_cols: np.ndarray = field(repr=False)
    parity_map: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return self.n - self.n_checks

    def syndrome(self, bits: np.ndarray) -> np.ndarray:
        counts = np.bincount(
            self.check_index,
            weights=np.asarray(bits, dtype=float)[self.var_index],
            minlength=self.n_checks,
        )
        return np.rint(counts).astype(np.int64) % 2


def _edge_assignment(n: int, m: int, rng: np.random.Generator):
    """Random simple bipartite graph with fixed variable degree 3."""
    stubs_per_var = np.repeat(np.arange(n), VAR_DEGREE)
    base, rem = divmod(VAR_DEGREE * n, m)
    row_weights = np.full(m, base)
    row_weights[:rem] += 1
    check_of = np.repeat(np.arange(m), row_weights)
    var_of = stubs_per_var[rng.permutation(VAR_DEGREE * n)]

    # swap away parallel edges; each pass relocates every duplicate stub
    for _ in range(200):
        key = check_of.astype(np.int64) * n + var_of
        order = np.argsort(key, kind="stable")
        dup = np.nonzero(np.diff(key[order]) == 0)[0]
        if len(dup) == 0:
            return check_of, var_of
        for s in order[dup + 1]:
            t = int(rng.integers(len(var_of)))
            var_of[s], var_of[t] = var_of[t], var_of[s]
    raise RuntimeError("parallel-edge repair did not settle")


def make_ldpc(
    n: int, rate: Fraction | str = Fraction(1, 2), seed: int = DEFAULT_CODE_SEED
) -> LdpcCode:
    """Draw a deterministic regular LDPC code and precompute its encoder.

    ``rate`` must make the check count n*(1 - rate) an integer; floats
    are snapped to the nearest small fraction first.  Construction
    retries with a derived seed until the parity matrix has full rank,
    so the realized rate is exactly the nominal one.
    """
    if n not in CODE_LENGTHS:
        raise ValueError(f"code length must be one of {CODE_LENGTHS}, got {n}")
    if isinstance(rate, float):
        rate = Fraction(rate).limit_denominator(100)
    rate = Fraction(rate)
    if not 0 < rate < 1:
        raise ValueError(f"code rate must lie in (0, 1), got {rate}")
    m_exact = (1 - rate) * n
    if m_exact.denominator != 1:
        raise ValueError(f"rate {rate} is not realizable at length {n}")
    m = int(m_exact)

    for attempt in range(20):
        rng = np.random.default_rng([seed, attempt])
        check_of, var_of = _edge_assignment(n, m, rng)
        h = np.zeros((m, n), dtype=np.uint8)
        h[check_of, var_of] = 1
        rref, pivots = _gf2_rref(h)
        if len(pivots) == m:
            break
    else:
        raise RuntimeError("no full-rank parity matrix after 20 attempts")

    parity_cols = np.array(pivots)
    message_cols = np.setdiff1d(np.arange(n), parity_cols)
    return LdpcCode(
        n=n,
        n_checks=m,
        rate=rate,
        seed=seed,
        check_index=check_of,
        var_index=var_of,
        message_cols=message_cols,
        parity_cols=parity_cols,
        parity_map=rref[:, message_cols],
    )


def encode(code: LdpcCode, message: np.ndarray) -> np.ndarray:
    """Systematic encoding on the code's message columns."""
    message = np.asarray(message)
    if message.shape != (code.k,):
        raise ValueError(f"message must have shape ({code.k},)")
    if np.any((message != 0) & (message != 1)):
        raise ValueError("message bits must be 0 or 1")
    word = np.zeros(code.n, dtype=np.uint8)
    word[code.message_cols] = message
    word[code.parity_cols] = (code.parity_map @ message) % 2
    return word


# ---------------------------------------------------------------------------
# sum-product decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DecodeOutcome:
    """Soft decoder output: total LLRs, hard bits, validity, passes used."""

    app_llr: np.ndarray
    hard: np.ndarray
    valid: bool
    iterations: int


def spa_decode(
    code: LdpcCode, llr: np.ndarray, iterations: int, early_stop: bool = True
) -> DecodeOutcome:
    """Vectorized log-domain sum-product over the Tanner graph edges."""
    if iterations < 1:
        raise ValueError("iterations must be positive")
    llr = np.asarray(llr, dtype=float)
    if llr.shape != (code.n,):
        raise ValueError(f"llr must have shape ({code.n},)")
    ci, vi = code.check_index, code.var_index
    m = code.n_checks
    v2c = llr[vi].copy()
    total = llr
    hard = (total < 0).astype(np.uint8)
    used = 0
    valid = not np.any(code.syndrome(hard))
    for it in range(iterations):
        if valid and early_stop:
            break
        t = np.tanh(np.clip(v2c, -LLR_CAP, LLR_CAP) / 2.0)
        logmag = np.log(np.maximum(np.abs(t), 1e-30))
        neg = (t < 0).astype(np.int64)
        sum_log = np.bincount(ci, weights=logmag, minlength=m)
        neg_cnt = np.rint(np.bincount(ci, weights=neg, minlength=m)).astype(np.int64)
        sign = 1 - 2 * ((neg_cnt[ci] - neg) % 2)
        prod = sign * np.exp(np.minimum(sum_log[ci] - logmag, 0.0))
        c2v = 2.0 * np.arctanh(np.clip(prod, -1 + 1e-15, 1 - 1e-15))
        c2v = np.clip(c2v, -LLR_CAP, LLR_CAP)
        total = llr + np.bincount(vi, weights=c2v, minlength=code.n)
        v2c = total[vi] - c2v
        hard = (total < 0).astype(np.uint8)
        used = it + 1
        valid = not np.any(code.syndrome(hard))
    return DecodeOutcome(app_llr=total, hard=hard, valid=valid, iterations=used)


class LdpcDecoder:
    """Soft-input soft-output handle around one code."""

    def __init__(self, code: LdpcCode):
        self.code = code

    @property
    def n(self) -> int:
        return self.code.n

    def decode(self, llr: np.ndarray, iterations: int) -> DecodeOutcome:
        return spa_decode(self.code, llr, iterations)

    def message_bits(self, codeword: np.ndarray) -> np.ndarray:
        return np.asarray(codeword)[self.code.message_cols]


class IdentityDecoder:
    """Pass-through stand-in: no code constraints, zero extrinsics."""

    def __init__(self, n: int):
        self.n = n

    def decode(self, llr: np.ndarray, iterations: int) -> DecodeOutcome:
        llr = np.asarray(llr, dtype=float)
        if llr.shape != (self.n,):
            raise ValueError(f"llr must have shape ({self.n},)")
        return DecodeOutcome(
            app_llr=llr.copy(),
            hard=(llr < 0).astype(np.uint8),
            valid=False,
            iterations=0,
        )


# ---------------------------------------------------------------------------
# bit labeling and soft mapping
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BitLabeling:
    """Bijection between symbol indices and bit patterns.

    ``labels[a]`` is the integer bit pattern of symbol index ``a`` (most
    significant bit first on the wire); ``mask0[j, a]`` marks symbols
    whose j-th bit is zero.
    """

    constellation: Constellation
    bits: int
    labels: np.ndarray
    index_of_label: np.ndarray
    mask0: np.ndarray


def gray_labeling(constellation: Constellation) -> BitLabeling:
    """Gray labels for PSK, quasi-Gray ring-major labels for APSK.

    Points are ranked by angle (PSK) or by ring then angle (APSK) and
    the ranks are Gray-coded, so angular neighbors within a ring differ
    in one bit and ring crossings in one bit as well.
    """
    m = constellation.size
    bits = int(round(math.log2(m)))
    if 2**bits != m:
        raise ValueError(f"constellation size {m} is not a power of two")
    ang = np.angle(constellation.points)
    if constellation.kind == "psk":
        order = np.argsort(ang, kind="stable")
    else:
        order = np.lexsort((ang, constellation.ring_index))
    ranks = np.arange(m)
    gray = ranks ^ (ranks >> 1)
    labels = np.empty(m, dtype=np.int64)
    labels[order] = gray
    index_of_label = np.empty(m, dtype=np.int64)
    index_of_label[labels] = np.arange(m)
    shifts = bits - 1 - np.arange(bits)
    mask0 = ((labels[None, :] >> shifts[:, None]) & 1) == 0
    return BitLabeling(
        constellation=constellation,
        bits=bits,
        labels=labels,
        index_of_label=index_of_label,
        mask0=mask0,
    )


def bits_to_indices(bits: np.ndarray, labeling: BitLabeling) -> np.ndarray:
    """Group bits most-significant-first into symbol indices."""
    bits = np.asarray(bits)
    b = labeling.bits
    if bits.ndim != 1 or len(bits) % b:
        raise ValueError(f"bit count must be a multiple of {b}")
    weights = 1 << (b - 1 - np.arange(b))
    vals = bits.reshape(-1, b) @ weights
    return labeling.index_of_label[vals]


def indices_to_bits(indices: np.ndarray, labeling: BitLabeling) -> np.ndarray:
    """Inverse of :func:`bits_to_indices`."""
    vals = labeling.labels[np.asarray(indices)]
    shifts = labeling.bits - 1 - np.arange(labeling.bits)
    return ((vals[:, None] >> shifts) & 1).reshape(-1).astype(np.uint8)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(x, axis=axis, keepdims=True)
    out = peak + np.log(np.sum(np.exp(x - peak), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def posteriors_to_bit_llrs(post: np.ndarray, labeling: BitLabeling) -> np.ndarray:
    """Per-bit LLRs log P(bit=0)/P(bit=1) from symbol posteriors (K, M)."""
    logp = np.log(np.maximum(np.asarray(post, dtype=float), 1e-300))
    k = logp.shape[0]
    out = np.empty((k, labeling.bits))
    for j in range(labeling.bits):
        out[:, j] = _logsumexp(logp[:, labeling.mask0[j]], axis=1) - _logsumexp(
            logp[:, ~labeling.mask0[j]], axis=1
        )
    return np.clip(out, -LLR_CAP, LLR_CAP).reshape(-1)


def bit_llrs_to_symbol_priors(llr: np.ndarray, labeling: BitLabeling) -> np.ndarray:
    """Independent-bit symbol priors (K, M) from per-bit LLRs."""
    b = labeling.bits
    llr = np.asarray(llr, dtype=float).reshape(-1, b)
    log_p0 = -np.logaddexp(0.0, -llr)
    log_p1 = -np.logaddexp(0.0, llr)
    mask = labeling.mask0.astype(float)
    logp = log_p0 @ mask + log_p1 @ (1.0 - mask)
    logp -= _logsumexp(logp, axis=1)[:, None]
    return np.exp(logp)


def make_interleaver(n: int, seed: int = DEFAULT_INTERLEAVER_SEED) -> np.ndarray:
    """Fixed pseudo-random bit permutation: wire position p carries code
    bit perm[p]."""
    if n < 1:
        raise ValueError("interleaver length must be positive")
    return np.random.default_rng([seed, n]).permutation(n)


# ---------------------------------------------------------------------------
# iterative detection and decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationSchedule:
    """Detector/decoder loop sizing: outer passes and decoder passes."""

    global_iters: int = 5
    local_iters: int = 20

    def __post_init__(self):
        if self.global_iters < 1 or self.local_iters < 1:
            raise ValueError("iteration counts must be at least 1")


@dataclass(frozen=True, eq=False)
class TurboResult:
    """Decoded codeword, convergence flag, and the information trace."""

    codeword_bits: np.ndarray
    converged: bool
    global_iterations: int
    mi_trace: np.ndarray


def _bit_information(llr: np.ndarray, bits: np.ndarray) -> float:
    """Binary mutual-information estimate from LLRs and the true bits."""
    sign = 1.0 - 2.0 * np.asarray(bits, dtype=float)
    x = sign * np.asarray(llr, dtype=float)
    info = 1.0 - np.mean(np.logaddexp(0.0, -x)) / math.log(2.0)
    return float(np.clip(info, 0.0, 1.0))


def run_iterative_receiver(
    y: np.ndarray,
    aux,
    constellation: Constellation,
    decoder,
    schedule: IterationSchedule,
    payload: np.ndarray | None = None,
    labeling: BitLabeling | None = None,
    interleaver: np.ndarray | None = None,
    true_bits: np.ndarray | None = None,
    progress: bool = False,
) -> TurboResult:
    """Exchange extrinsics between the trellis detector and a decoder.

    ``y`` holds one block of detection statistics; ``payload`` selects
    the epochs that carry code bits (the rest keep uniform priors and
    act as guards).  Each global pass runs the detector with the
    decoder's latest extrinsics as symbol priors, demaps to bit LLRs,
    removes the prior to keep the exchange extrinsic, de-interleaves
    into the decoder, and sends the decoder's extrinsics back.  Stops
    early as soon as the decoder reports a valid codeword.  The result's
    ``mi_trace`` logs a per-pass information estimate when the true
    code bits are supplied (NaN otherwise).

    A memoryless law expects ``y`` already normalized to unit symbol
    gain; an Ungerboeck law takes the raw matched-filter bank.
    """
    y = np.asarray(y)
    k_epochs = y.shape[0]
    labeling = gray_labeling(constellation) if labeling is None else labeling
    payload = np.arange(k_epochs) if payload is None else np.asarray(payload)
    n_code = decoder.n
    if len(payload) * labeling.bits != n_code:
        raise ValueError(
            f"{len(payload)} payload epochs x {labeling.bits} bits "
            f"cannot carry a length-{n_code} codeword"
        )
    perm = make_interleaver(n_code) if interleaver is None else np.asarray(interleaver)
    if len(perm) != n_code:
        raise ValueError("interleaver length must match the code length")
    inv = np.argsort(perm)

    m = constellation.size
    wire_prior = np.zeros(n_code)
    mi = np.full(schedule.global_iters, np.nan)
    outcome = None
    done = 0
    converged = False
    for g in range(schedule.global_iters):
        priors = np.full((k_epochs, m), 1.0 / m)
        priors[payload] = bit_llrs_to_symbol_priors(wire_prior, labeling)
        if aux.kind == "memoryless":
            block = memoryless_detect(y, constellation, aux.n_total, priors=priors)
        else:
            block = bcjr_detect(y, aux, constellation, priors=priors)
        bit_app = posteriors_to_bit_llrs(block.posteriors[payload], labeling)
        dec_in = (bit_app - wire_prior)[inv]
        outcome = decoder.decode(dec_in, schedule.local_iters)
        wire_prior = np.clip(outcome.app_llr - dec_in, -LLR_CAP, LLR_CAP)[perm]
        if true_bits is not None:
            mi[g] = _bit_information(outcome.app_llr, true_bits)
        done = g + 1
        if progress:
            print(f"[turbo] pass {done}: decoder valid={outcome.valid}")
        if outcome.valid:
            converged = True
            break
    return TurboResult(
        codeword_bits=outcome.hard,
        converged=converged,
        global_iterations=done,
        mi_trace=mi,
    )


# ---------------------------------------------------------------------------
# operating points and error-rate measurement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModCod:
    """One modulation-and-code operating point on the packed grid."""

    constellation: str
    rate: Fraction
    tau: float
    nu: float
    w_scale: float = 1.0
    snr_db: float = 0.0

    def __post_init__(self):
        build_constellation(self.constellation)
        object.__setattr__(self, "rate", Fraction(self.rate))
        if not 0 < self.rate < 1:
            raise ValueError(f"code rate must lie in (0, 1), got {self.rate}")
        if not 0 < self.tau <= 1.5 or not 0 < self.nu <= 1.5:
            raise ValueError("tau and nu must lie in (0, 1.5]")
        if self.w_scale <= 0:
            raise ValueError("w_scale must be positive")


def modcod_link(
    modcod: ModCod,
    nonlinear: bool = True,
    input_backoff_db: float = 2.5,
    num_users: int = 5,
    alpha: float = 0.2,
    span_symbols: int = 16,
    samples_per_symbol: int = 8,
    t_ref: float = 1.0 / 27.5e6,
    f_ref: float = 41.5e6,
) -> LinkSpec:
    """Build the downlink a MODCOD operates on."""
    pulse = rrc_pulse(
        alpha,
        span_symbols=span_symbols,
        samples_per_symbol=samples_per_symbol,
        bandwidth_scale=modcod.w_scale,
    )
    grid = PackingGrid(
        modcod.tau, modcod.nu, t_ref=t_ref, f_ref=f_ref, num_users=num_users
    )
    if nonlinear:
        fs = samples_per_symbol / grid.symbol_time
        transponder = default_transponder(
            fs, f_ref, input_backoff_db=input_backoff_db
        )
    else:
        transponder = TransponderSpec(hpa=None)
    return LinkSpec(
        constellation=build_constellation(modcod.constellation),
        pulse=pulse,
        grid=grid,
        transponder=transponder,
    )


def wilson_interval(errors: int, total: int, z: float = WILSON_Z):
    """Binomial score interval; sane at zero observed errors."""
    if total < 1:
        raise ValueError("total must be positive")
    p = errors / total
    denom = 1.0 + z * z / total
    center = (p + z * z / (2 * total)) / denom
    half = z * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


@dataclass(frozen=True)
class BerEstimate:
    """Measured bit error ratio with its Wilson confidence interval."""

    snr_db: float
    ber: float
    ci_low: float
    ci_high: float
    trials: int
    bit_errors: int


def estimate_ber(
    modcod: ModCod,
    schedule: IterationSchedule,
    n_codewords: int,
    rng: np.random.Generator,
    snr_db: float | None = None,
    code: LdpcCode | None = None,
    code_length: int = 4032,
    family: DetectorFamily | None = None,
    link: LinkSpec | None = None,
    kernel_set=None,
    lut=None,
    min_errors: int = 10,
    progress: bool = False,
) -> BerEstimate:
    """Monte Carlo message-bit error ratio of the full coded downlink.

    Each trial encodes a fresh message, maps it onto the center carrier
    of the packed downlink (random interferers and random guard symbols
    around it), and runs the iterative receiver on the matched-filter
    statistics.  Trials stop at ``n_codewords`` or once ``min_errors``
    bit errors have been seen.  ``kernel_set`` reuses an identified
    signal model across calls in an SNR sweep; ``lut`` applies a
    predistorter to every transmitted stream (the memoryless receiver
    family's companion).
    """
    if n_codewords < 1:
        raise ValueError("n_codewords must be positive")
    link = modcod_link(modcod) if link is None else link
    snr = modcod.snr_db if snr_db is None else snr_db
    n0 = noise_density(link, snr)
    chain = build_chain(link, n0, rng, kernel_set=kernel_set)
    family = DetectorFamily(kind="shortening", memory=1) if family is None else family
    aux = family_aux(chain, family, family.n_i)

    cons = chain.constellation
    labeling = gray_labeling(cons)
    code = make_ldpc(code_length, modcod.rate) if code is None else code
    if code.n % labeling.bits:
        raise ValueError(
            f"code length {code.n} does not fill {labeling.bits}-bit symbols"
        )
    decoder = LdpcDecoder(code)
    perm = make_interleaver(code.n)
    n_payload = code.n // labeling.bits
    guard = guard_symbols(link)
    kblk = n_payload + 2 * guard
    payload = np.arange(guard, guard + n_payload)
    users = link.grid.num_users
    center = (users - 1) // 2
    dt = link.grid.symbol_time / link.sps

    bit_errors = 0
    trials = 0
    while trials < n_codewords and bit_errors < min_errors:
        message = rng.integers(0, 2, size=code.k).astype(np.uint8)
        word = encode(code, message)
        idx = rng.integers(0, cons.size, size=(users, kblk))
        idx[center, guard : guard + n_payload] = bits_to_indices(
            word[perm], labeling
        )
        sim = simulate_downlink(link, idx, chain.n0, rng, lut=lut)
        y = matched_filter_symbols(
            sim["rx"].samples, chain.filters, sim["sym0"], link.sps, kblk, dt
        ).reshape(kblk, chain.dim)
        if aux.kind == "memoryless":
            y = y[:, 0] / chain.scalar_gain()
        result = run_iterative_receiver(
            y,
            aux,
            cons,
            decoder,
            schedule,
            payload=payload,
            labeling=labeling,
            interleaver=perm,
            true_bits=word,
        )
        errs = int(np.sum(decoder.message_bits(result.codeword_bits) != message))
        bit_errors += errs
        trials += 1
        if progress:
            print(
                f"[ber] snr {snr:+.1f} dB trial {trials}: "
                f"{errs} bit errors, converged={result.converged}"
            )
    total = trials * code.k
    lo, hi = wilson_interval(bit_errors, total)
    return BerEstimate(
        snr_db=snr,
        ber=bit_errors / total,
        ci_low=lo,
        ci_high=hi,
        trials=trials,
        bit_errors=bit_errors,
    )


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

BER_COLUMNS = ("snr_db", "ber", "ci_low", "ci_high", "trials")


def write_ber_csv(path, points) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(BER_COLUMNS) + "\n")
        for p in points:
            fh.write(
                f"{float(p.snr_db)!r},{float(p.ber)!r},{float(p.ci_low)!r},"
                f"{float(p.ci_high)!r},{p.trials}\n"
            )


def read_ber_csv(path) -> list[BerEstimate]:
    out = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ",".join(BER_COLUMNS):
            raise ValueError(f"unexpected BER header {header!r}")
        for line in fh:
            snr, ber, lo, hi, trials = line.strip().split(",")
            out.append(
                BerEstimate(
                    snr_db=float(snr),
                    ber=float(ber),
                    ci_low=float(lo),
                    ci_high=float(hi),
                    trials=int(trials),
                    bit_errors=-1,
                )
            )
    return out


def modcod_to_dict(modcod: ModCod) -> dict:
    return {
        "constellation": modcod.constellation,
        "rate": str(modcod.rate),
        "tau": modcod.tau,
        "nu": modcod.nu,
        "w_scale": modcod.w_scale,
        "snr_db": modcod.snr_db,
    }


def modcod_from_dict(row: dict) -> ModCod:
    missing = {"constellation", "rate", "tau", "nu"} - set(row)
    if missing:
        raise ValueError(f"modcod row is missing {sorted(missing)}")
    return ModCod(
        constellation=row["constellation"],
        rate=Fraction(row["rate"]),
        tau=float(row["tau"]),
        nu=float(row["nu"]),
        w_scale=float(row.get("w_scale", 1.0)),
        snr_db=float(row.get("snr_db", 0.0)),
    )


def save_modcods(path, modcods) -> None:
    with open(path, "w") as fh:
        json.dump([modcod_to_dict(mc) for mc in modcods], fh, indent=2)
        fh.write("\n")


def load_modcods(path) -> list[ModCod]:
    with open(path) as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise ValueError("modcod file must hold a JSON list of rows")
    return [modcod_from_dict(row) for row in rows]
