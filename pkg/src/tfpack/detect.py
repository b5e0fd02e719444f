"""
Reduced-complexity MAP detection on auxiliary channel laws
==========================================================

Two auxiliary channel families share the PosteriorBlock output:

* memoryless: y_k = x_k + n_k with working variance 2*(N0 + N_I); the
  extra density N_I is a free design parameter that can raise the
  mismatched information rate on interference-laden statistics.
* ungerboeck: unnormalized law  exp( 2 Re(y^H H x) - x^H G^r x )  where
  G^r is banded with detector memory L_r and H is the front end
  (channel shortener).  Both are found in closed form by maximizing the
  Gaussian-input information rate of the mismatched law: per frequency,
  the error spectrum E = 2N0 (2N0 R^-1 + G)^-1 is fitted by an order-L_r
  prediction filter (Yule-Walker), giving the banded target
  U = A^H P^-1 A, then H = (R G + 2N0 I)^-1 R U.  Scalars are the d = 1
  special case of the block (APSK bank) solve.

Conventions: g^r_{-i} = (g^r_i)^H; the 1/2N0 normalization is fixed so
that L_r >= channel memory returns H = I/2N0, G^r = G/2N0 exactly.  The
BCJR is exact forward/backward in the log domain (log-sum-exp, never
max-log), with zero prehistory (cross terms reaching before the block
start are dropped, matching the finite-block law) and uniform backward
initialization, so the summed branch metrics reproduce the law
identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .volterra import GramSequence
from .waveform import Constellation

__all__ = [
    "AuxChannelSpec",
    "PosteriorBlock",
    "input_moment_matrix",
    "symbol_vectors",
    "channel_shortening_optimize",
    "memoryless_aux",
    "bcjr_detect",
    "memoryless_detect",
    "save_aux_spec",
    "load_aux_spec",
    "write_posteriors_csv",
]

STATE_CAP = 4096
LOG_FLOOR = -700.0


@dataclass(frozen=True)
class AuxChannelSpec:
    """One auxiliary channel law.

    kind "memoryless": only ``n_total`` (= N0 + N_I) is used.
    kind "ungerboeck": ``h_taps`` is the two-sided front-end response
    (lag = index - h_center, blocks d x d), ``g_taps`` the causal half of
    the banded target (lags 0..L_r), ``basis`` names the symbol-vector
    map ("scalar", "ring" or "order").  ``ir_gaussian_nats`` records the
    Gaussian-input rate predicted by the closed-form solve.
    """

    kind: str
    n_total: float | None = None
    h_taps: np.ndarray | None = None
    h_center: int = 0
    g_taps: np.ndarray | None = None
    basis: str = "scalar"
    ir_gaussian_nats: float | None = None

    def __post_init__(self):
        if self.kind == "memoryless":
            if self.n_total is None or self.n_total <= 0:
                raise ValueError("memoryless law needs n_total > 0")
            return
        if self.kind != "ungerboeck":
            raise ValueError(f"unknown auxiliary law {self.kind!r}")
        if self.h_taps is None or self.g_taps is None:
            raise ValueError("ungerboeck law needs h_taps and g_taps")
        if self.h_taps.shape[1:] != self.g_taps.shape[1:]:
            raise ValueError("front end and target disagree on dimension")
        if not 0 <= self.h_center < self.h_taps.shape[0]:
            raise ValueError("h_center outside the stored taps")
        g0 = self.g_taps[0]
        if np.max(np.abs(g0 - g0.conj().T)) > 1e-9 * max(np.max(np.abs(g0)), 1e-300):
            raise ValueError("g^r_0 must be Hermitian")

    @property
    def memory(self) -> int:
        return 0 if self.g_taps is None else self.g_taps.shape[0] - 1

    @property
    def dim(self) -> int:
        return 1 if self.g_taps is None else self.g_taps.shape[1]


@dataclass(frozen=True)
class PosteriorBlock:
    """Per-epoch posteriors plus the log-likelihoods of the auxiliary law.

    ``posteriors`` has shape (B, K, M) batched or (K, M); ``log_py`` is
    log q(y) under the law, up to the law's fixed constant.  When the
    transmitted symbols were supplied, ``log_py_given_x`` holds
    log q(y|x) and ``per_epoch_terms`` the epoch-wise information terms
    lambda_k(true) - c_k whose interior average estimates the rate.
    """

    posteriors: np.ndarray | None
    log_py: np.ndarray
    log_py_given_x: np.ndarray | None = None
    per_epoch_terms: np.ndarray | None = None


# ---------------------------------------------------------------------------
# symbol statistics and bases
# ---------------------------------------------------------------------------


def symbol_vectors(constellation: Constellation, basis: str, dim: int) -> np.ndarray:
    """Map constellation points to statistic-domain vectors, shape (M, d).

    "scalar": the point itself (d = 1).  "ring": x routed to its ring's
    coordinate.  "order": (x, x|x|^2, ..., x|x|^(2(d-1))).
    """
    pts = constellation.points
    if basis == "scalar":
        if dim != 1:
            raise ValueError("scalar basis is one-dimensional")
        return pts[:, None]
    if basis == "ring":
        n_rings = len(constellation.ring_radii)
        if dim != n_rings:
            raise ValueError(f"ring basis needs dim == {n_rings}")
        out = np.zeros((constellation.size, dim), dtype=complex)
        out[np.arange(constellation.size), constellation.ring_index] = pts
        return out
    if basis == "order":
        mag2 = np.abs(pts) ** 2
        return pts[:, None] * mag2[:, None] ** np.arange(dim)[None, :]
    raise ValueError(f"unknown basis {basis!r}")


def input_moment_matrix(constellation: Constellation, basis: str, dim: int) -> np.ndarray:
    """R = E[v v^H] over uniform symbols for the chosen statistic basis."""
    v = symbol_vectors(constellation, basis, dim)
    return v.T @ v.conj() / constellation.size


# ---------------------------------------------------------------------------
# channel shortening closed form
# ---------------------------------------------------------------------------


def memoryless_aux(n0: float, n_extra: float = 0.0) -> AuxChannelSpec:
    """Auxiliary AWGN law with working density N0 + N_I."""
    return AuxChannelSpec(kind="memoryless", n_total=n0 + n_extra)


def _block_yule_walker(cov, order):
    """Forward linear prediction on block covariances cov[m] ~ E[u_{n+m} u_n^H].

    Solves sum_i A_i cov[j-i] = cov[j] for j = 1..order and returns
    (A_1..A_order stacked, error covariance P).
    """
    d = cov.shape[1]

    def blk(m):
        return cov[m] if m >= 0 else cov[-m].conj().T

    if order == 0:
        p = 0.5 * (blk(0) + blk(0).conj().T)
        return np.zeros((0, d, d), dtype=complex), p

    # conjugate-transposed system: sum_i cov[i-j] A_i^H = cov[j]^H
    s = np.zeros((order * d, order * d), dtype=complex)
    for j in range(order):
        for i in range(order):
            s[j * d : (j + 1) * d, i * d : (i + 1) * d] = blk(i - j)
    rhs = np.concatenate([blk(j + 1).conj().T for j in range(order)], axis=0)
    sol = np.linalg.solve(s, rhs)
    a = np.stack([sol[i * d : (i + 1) * d].conj().T for i in range(order)])
    p = blk(0) - sum(a[i] @ blk(-(i + 1)) for i in range(order))
    p = 0.5 * (p + p.conj().T)
    return a, p


def channel_shortening_optimize(
    gram: GramSequence,
    n0: float,
    l_r: int,
    r_matrix: np.ndarray | None = None,
    basis: str = "scalar",
    nfft: int = 1024,
) -> AuxChannelSpec:
    """Closed-form front end + banded target maximizing the Gaussian rate.

    ``r_matrix`` is the input second-moment matrix E[v v^H] (1 for
    unit-power scalars).  Dense-grid realization: the Gram spectrum G(w)
    on ``nfft`` bins gives the error spectrum E = 2N0 (2N0 R^-1 + G)^-1,
    whose covariances feed an order-L_r block Yule-Walker; the resulting
    prediction filter A and error P build U(w) = A^H P^-1 A, the banded
    target G^r = U - R^-1 and the front end H(w) = (R G + 2N0 I)^-1 R U.
    """
    if n0 <= 0:
        raise ValueError("noise density must be positive")
    if l_r < 0:
        raise ValueError("detector memory must be non-negative")
    d = gram.dim
    if r_matrix is None:
        r_matrix = np.eye(d, dtype=complex)
    r_matrix = np.asarray(r_matrix, dtype=complex).reshape(d, d)

    g_spec = gram.spectrum(nfft)                       # (nfft, d, d)
    r_inv = np.linalg.inv(r_matrix)
    core = 2 * n0 * r_inv[None, :, :] + g_spec

    # guard against a numerically singular spectrum (tiny noise + deep nulls)
    ev = np.linalg.eigvalsh(0.5 * (core + np.conj(np.swapaxes(core, 1, 2))))
    floor = 1e-12 * float(np.max(ev))
    if float(np.min(ev)) < floor:
        jitter = floor - float(np.min(ev))
        core = core + jitter * np.eye(d)[None, :, :]
        print(f"[cs] spectrum near singular, regularized with jitter {jitter:.3e}")

    e_spec = 2 * n0 * np.linalg.inv(core)
    e_cov = np.fft.ifft(e_spec, axis=0)                # e_cov[m] ~ E_m, m >= 0
    coeffs, p_err = _block_yule_walker(e_cov, l_r)

    # U(w) = A(w)^H P^-1 A(w) with A(w) = I - sum_i A_i e^{-jwi}
    w = 2 * np.pi * np.arange(nfft) / nfft
    a_spec = np.broadcast_to(np.eye(d, dtype=complex), (nfft, d, d)).copy()
    for i in range(l_r):
        a_spec -= np.exp(-1j * w * (i + 1))[:, None, None] * coeffs[i][None, :, :]
    p_inv = np.linalg.inv(p_err)
    u_spec = np.conj(np.swapaxes(a_spec, 1, 2)) @ p_inv[None, :, :] @ a_spec

    # banded target: g^r_m = u_m - R^-1 delta_m, from polynomial coefficients
    cpoly = np.concatenate([np.eye(d, dtype=complex)[None], -coeffs], axis=0)
    g_taps = np.zeros((l_r + 1, d, d), dtype=complex)
    for m in range(l_r + 1):
        acc = np.zeros((d, d), dtype=complex)
        for i in range(l_r + 1 - m):
            acc += cpoly[i].conj().T @ p_inv @ cpoly[i + m]
        g_taps[m] = acc
    g_taps[0] -= r_inv
    g_taps[0] = 0.5 * (g_taps[0] + g_taps[0].conj().T)

    rg = r_matrix[None, :, :] @ g_spec
    h_spec = np.linalg.inv(rg + 2 * n0 * np.eye(d)[None, :, :]) \
        @ r_matrix[None, :, :] @ u_spec
    h_time = np.fft.ifft(h_spec, axis=0)
    h_taps = np.fft.fftshift(h_time, axes=0)           # lag = idx - nfft//2
    center = nfft // 2

    # trim negligible outer taps, keeping the window symmetric around lag 0
    norms = np.linalg.norm(h_taps, axis=(1, 2))
    keep = np.flatnonzero(norms > 1e-12 * norms.max())
    reach = max(abs(int(keep.min()) - center), abs(int(keep.max()) - center))
    reach = min(reach, center - 1)
    h_taps = h_taps[center - reach : center + reach + 1]

    _, logdet_p = np.linalg.slogdet(p_err)
    _, logdet_r = np.linalg.slogdet(r_matrix)
    ir_nats = float(logdet_r - logdet_p)

    return AuxChannelSpec(
        kind="ungerboeck",
        h_taps=h_taps,
        h_center=reach,
        g_taps=g_taps,
        basis=basis,
        ir_gaussian_nats=ir_nats,
    )


# ---------------------------------------------------------------------------
# BCJR on the Ungerboeck law
# ---------------------------------------------------------------------------


def _front_end(y: np.ndarray, aux: AuxChannelSpec) -> np.ndarray:
    """z_n = sum_m h_m^H y_{n+m} with zero extension outside the block."""
    b, k, d = y.shape
    n_h = aux.h_taps.shape[0]
    z = np.zeros((b, k, d), dtype=complex)
    start = n_h - 1 - aux.h_center
    for i in range(d):
        acc = np.zeros((b, k + n_h - 1), dtype=complex)
        for j in range(d):
            kern = np.conj(aux.h_taps[::-1, j, i])
            acc += scipy.signal.fftconvolve(y[:, :, j], kern[None, :], axes=1)
        z[:, :, i] = acc[:, start : start + k]
    return z


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m_safe + np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _log_priors(priors, b, k, m):
    if priors is None:
        return np.full((b, k, m), -np.log(m))
    priors = np.asarray(priors, dtype=float)
    if priors.ndim == 2:
        priors = np.broadcast_to(priors[None], (b, k, m))
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(np.maximum(priors, 0.0)), LOG_FLOOR)


def bcjr_detect(
    y: np.ndarray,
    aux: AuxChannelSpec,
    constellation: Constellation,
    priors: np.ndarray | None = None,
    true_indices: np.ndarray | None = None,
    forward_only: bool = False,
) -> PosteriorBlock:
    """Exact log-domain forward/backward on the Ungerboeck law.

    Parameters
    ----------
    y : statistics, shape (K,), (K, d), or batched (B, K, d).
    priors : optional per-epoch symbol priors (K, M) or (B, K, M),
        probabilities; default uniform.
    true_indices : optional transmitted symbol indices (K,) or (B, K);
        enables log q(y|x) and the per-epoch information terms.
    forward_only : skip the backward pass; posteriors come back None.
        The log-likelihood fields are unaffected (rate estimation only
        needs the forward normalizers).

    Returns a PosteriorBlock; arrays keep the batch axis iff the input
    had one.
    """
    if aux.kind != "ungerboeck":
        raise ValueError("bcjr_detect needs an ungerboeck auxiliary law")
    d = aux.dim
    y = np.asarray(y, dtype=complex)
    squeeze = y.ndim < 3
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim == 2:
        y = y[None, :, :]
    b, k, d_y = y.shape
    if d_y != d:
        raise ValueError(f"statistics dimension {d_y} != law dimension {d}")

    m = constellation.size
    l_r = aux.memory
    n_states = m**l_r
    if n_states > STATE_CAP:
        raise ValueError(f"state count {n_states} exceeds cap {STATE_CAP}")

    v = symbol_vectors(constellation, aux.basis, d)    # (M, d)
    z = _front_end(y, aux)                             # (B, K, d)
    corr = 2 * np.real(np.einsum("bkd,md->bkm", z, np.conj(v)))
    diag = np.real(np.einsum("md,de,me->m", np.conj(v), aux.g_taps[0], v))
    log_prior = _log_priors(priors, b, k, m)
    epoch_metric = corr - diag[None, None, :] + log_prior

    if true_indices is not None:
        idx_true = np.asarray(true_indices)
        if idx_true.ndim == 1:
            idx_true = np.broadcast_to(idx_true[None], (b, k))

    # ---- degenerate memoryless trellis
    if l_r == 0:
        c_k = _logsumexp(epoch_metric, axis=2)             # (B, K)
        post = None if forward_only else np.exp(epoch_metric - c_k[:, :, None])
        log_py = np.sum(c_k, axis=1)
        lpx = terms = None
        if true_indices is not None:
            lam = np.take_along_axis(corr, idx_true[:, :, None], axis=2)[:, :, 0] \
                - diag[idx_true]
            lpx = np.sum(lam, axis=1)
            terms = lam + np.take_along_axis(log_prior, idx_true[:, :, None],
                                             axis=2)[:, :, 0] - c_k
        return _maybe_squeeze(PosteriorBlock(post, log_py, lpx, terms), squeeze)

    # cross terms: cross[i-1][a_new, a_old] = 2 Re(v_new^H g_i v_old)
    cross = np.stack(
        [
            2 * np.real(np.einsum("ad,de,ce->ac", np.conj(v), aux.g_taps[i], v))
            for i in range(1, l_r + 1)
        ]
    )

    # state s encodes (x_{n-1}, ..., x_{n-L_r}), x_{n-1} the lowest digit
    digits = np.empty((l_r, n_states), dtype=np.int64)
    tmp = np.arange(n_states)
    for i in range(l_r):
        digits[i] = tmp % m
        tmp //= m
    rest = m ** (l_r - 1)

    # per-epoch transition tables: epoch n keeps cross terms i <= min(n, L_r)
    # so the zero prehistory of the finite-block law is exact
    tables = []
    for n_terms in range(l_r + 1):
        t = np.zeros((n_states, m))
        for i in range(n_terms):
            t -= cross[i][:, digits[i]].T
        tables.append(t.reshape(m, rest, m))           # (oldest, rest, input)

    alpha = np.full((b, n_states), -np.inf)
    alpha[:, 0] = 0.0                                  # empty prehistory
    c_hist = np.empty((b, k))
    alphas = None if forward_only else np.empty((b, k, n_states))
    for n in range(k):
        if alphas is not None:
            alphas[:, n] = alpha
        trans = tables[min(n, l_r)]
        contrib = alpha.reshape(b, m, rest)[:, :, :, None] + trans[None]
        stepped = _logsumexp(contrib, axis=1) + epoch_metric[:, n, None, :]
        new_alpha = stepped.reshape(b, n_states)       # s' = rest * m + input
        c = _logsumexp(new_alpha, axis=1)
        c_hist[:, n] = c
        alpha = new_alpha - c[:, None]

    log_py = np.sum(c_hist, axis=1)

    post = None
    if not forward_only:
        beta = np.zeros((b, n_states))                 # uniform closure
        post = np.empty((b, k, m))
        for n in range(k - 1, -1, -1):
            trans = tables[min(n, l_r)]
            step = trans[None] + epoch_metric[:, n, None, None, :] \
                + beta.reshape(b, rest, m)[:, None, :, :]
            joint = alphas[:, n].reshape(b, m, rest)[:, :, :, None] + step
            post_n = _logsumexp(joint.reshape(b, m * rest, m), axis=1)
            norm = _logsumexp(post_n, axis=1)
            post[:, n] = np.exp(post_n - norm[:, None])
            beta = _logsumexp(step, axis=3).reshape(b, n_states)
            beta = beta - _logsumexp(beta, axis=1)[:, None]

    lpx = terms = None
    if true_indices is not None:
        lam = np.take_along_axis(corr, idx_true[:, :, None], axis=2)[:, :, 0] \
            - diag[idx_true]
        for i in range(1, l_r + 1):
            lam[:, i:] -= cross[i - 1][idx_true[:, i:], idx_true[:, :-i]]
        lpx = np.sum(lam, axis=1)
        terms = lam + np.take_along_axis(log_prior, idx_true[:, :, None],
                                         axis=2)[:, :, 0] - c_hist
    return _maybe_squeeze(PosteriorBlock(post, log_py, lpx, terms), squeeze)


def _maybe_squeeze(block: PosteriorBlock, squeeze: bool) -> PosteriorBlock:
    if not squeeze:
        return block
    return PosteriorBlock(
        posteriors=None if block.posteriors is None else block.posteriors[0],
        log_py=block.log_py[0],
        log_py_given_x=None if block.log_py_given_x is None
        else block.log_py_given_x[0],
        per_epoch_terms=None if block.per_epoch_terms is None
        else block.per_epoch_terms[0],
    )


# ---------------------------------------------------------------------------
# memoryless detection
# ---------------------------------------------------------------------------


def memoryless_detect(
    y: np.ndarray,
    constellation: Constellation,
    n_total: float,
    priors: np.ndarray | None = None,
    true_indices: np.ndarray | None = None,
) -> PosteriorBlock:
    """Per-symbol Gaussian posteriors with working variance 2*(N0 + N_I)."""
    if n_total <= 0:
        raise ValueError("total working density must be positive")
    y = np.asarray(y, dtype=complex)
    squeeze = y.ndim < 2
    if y.ndim == 1:
        y = y[None, :]
    b, k = y.shape
    m = constellation.size
    var = 2.0 * n_total
    dist2 = np.abs(y[:, :, None] - constellation.points[None, None, :]) ** 2
    lam = -dist2 / var - np.log(np.pi * var)
    log_prior = _log_priors(priors, b, k, m)
    total = lam + log_prior
    c_k = _logsumexp(total, axis=2)
    post = np.exp(total - c_k[:, :, None])
    log_py = np.sum(c_k, axis=1)
    lpx = terms = None
    if true_indices is not None:
        idx = np.asarray(true_indices)
        if idx.ndim == 1:
            idx = np.broadcast_to(idx[None], (b, k))
        lam_true = np.take_along_axis(lam, idx[:, :, None], axis=2)[:, :, 0]
        lpx = np.sum(lam_true, axis=1)
        terms = lam_true + np.take_along_axis(log_prior, idx[:, :, None],
                                              axis=2)[:, :, 0] - c_k
    block = PosteriorBlock(post, log_py, lpx, terms)
    return _maybe_squeeze(block, squeeze)


# ---------------------------------------------------------------------------
# persistence / debugging
# ---------------------------------------------------------------------------


def save_aux_spec(path, aux: AuxChannelSpec):
    payload = {"kind": aux.kind, "basis": aux.basis}
    if aux.kind == "memoryless":
        payload["n_total"] = aux.n_total
    else:
        payload["h_taps"] = aux.h_taps
        payload["h_center"] = aux.h_center
        payload["g_taps"] = aux.g_taps
        if aux.ir_gaussian_nats is not None:
            payload["ir_gaussian_nats"] = aux.ir_gaussian_nats
    np.savez(path, **payload)


def load_aux_spec(path) -> AuxChannelSpec:
    with np.load(path, allow_pickle=False) as data:
        kind = str(data["kind"])
        if kind == "memoryless":
            return AuxChannelSpec(kind=kind, n_total=float(data["n_total"]),
                                  basis=str(data["basis"]))
        return AuxChannelSpec(
            kind=kind,
            h_taps=data["h_taps"],
            h_center=int(data["h_center"]),
            g_taps=data["g_taps"],
            basis=str(data["basis"]),
            ir_gaussian_nats=float(data["ir_gaussian_nats"])
            if "ir_gaussian_nats" in data else None,
        )


def write_posteriors_csv(path, block: PosteriorBlock):
    """Debug dump: one row per epoch, columns epoch, p0..p{M-1}."""
    post = block.posteriors
    if post.ndim == 3:
        post = post[0]
    k, m = post.shape
    with open(path, "w") as fh:
        fh.write("epoch," + ",".join(f"p{i}" for i in range(m)) + "\n")
        for n in range(k):
            fh.write(str(n) + "," + ",".join(repr(float(x)) for x in post[n]) + "\n")
