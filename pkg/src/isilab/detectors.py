"""Classical reference detectors: log-domain BCJR, damped SPA, block LMMSE.

All detectors emit bitwise log-likelihood ratios with the convention that
positive values favor bit 0.  Likelihood exponents use the total complex
noise variance: log p(y|s) = -|y - s|^2 / sigma2 + const.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import build_channel_matrix, zero_pad
from .graphs import VN_VIRTUAL

LLR_MAX = 40.0


def clip_llr(values, limit=LLR_MAX):
    return np.clip(values, -limit, limit)


@dataclass
class LlrVector:
    """Per-bit log-likelihood ratios with an explicit role tag."""

    values: np.ndarray
    role: str = "total"  # total | extrinsic | prior

    def __post_init__(self):
        if self.role not in ("total", "extrinsic", "prior"):
            raise ValueError(f"unknown LLR role {self.role!r}")
        v = np.asarray(self.values, dtype=np.float64)
        v = np.where(np.isposinf(v), LLR_MAX, v)
        v = np.where(np.isneginf(v), -LLR_MAX, v)
        if not np.all(np.isfinite(v)):
            raise ValueError("LLR values must be finite after saturation")
        self.values = v

    def saturated(self, limit=LLR_MAX):
        return LlrVector(clip_llr(self.values, limit), role=self.role)

    def hard_bits(self):
        return (self.values < 0).astype(np.int64)


def max_star(values, axis=None):
    """Jacobian logarithm: exact log-sum-exp with max stabilization."""
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise ValueError("max_star of an empty set")
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.squeeze(m, axis=axis) if axis is not None else m.reshape(())
    s = np.log(np.sum(np.exp(a - m), axis=axis))
    return out + s


def bit_prior_to_symbol_logp(prior_llrs, constellation):
    """Per-symbol log priors from per-bit prior LLRs (product of bits).

    ``prior_llrs``: (..., k) with k bits per symbol.  Returns (..., M).
    """
    labels = constellation.bit_labels  # (M, k)
    p = np.asarray(prior_llrs, dtype=np.float64)
    # log P(bit=c) = -softplus(-(1-2c) * llr)
    signs = 1.0 - 2.0 * labels  # (M, k)
    t = -p[..., None, :] * signs  # (..., M, k)
    return -np.logaddexp(0.0, t).sum(axis=-1)


def symbol_logp_to_bit_llrs(logp, constellation):
    """Marginalize per-symbol log beliefs (..., M) into per-bit LLRs (..., k)."""
    labels = constellation.bit_labels
    k = constellation.bits_per_symbol
    out = np.empty(logp.shape[:-1] + (k,), dtype=np.float64)
    for b in range(k):
        zero = labels[:, b] == 0
        out[..., b] = max_star(logp[..., zero], axis=-1) - max_star(logp[..., ~zero], axis=-1)
    return out


# -- BCJR ------------------------------------------------------------------


class Trellis:
    """State machine over the symbol alphabet augmented with the zero symbol.

    States encode the last L symbol indices in base M+1 (index 0 is the
    boundary zero symbol), so boundary stages need no special casing: the
    recursion starts in the all-zero state and the tail inputs are forced
    to the zero symbol.
    """

    def __init__(self, cir, constellation, state_budget=2_000_000):
        L = cir.memory
        M = constellation.order
        A = M + 1
        n_states = A**L
        if n_states * A > state_budget:
            raise ValueError(
                f"trellis needs {n_states * A} transitions, over the budget {state_budget}"
            )
        self.memory = L
        self.order = M
        self.n_states = n_states
        self.alphabet = np.concatenate([[0.0 + 0.0j], constellation.points])
        # noiseless branch output for every (state, input)
        states = np.arange(n_states)
        digits = np.empty((n_states, L), dtype=np.int64)
        rem = states.copy()
        for l in range(L):
            digits[:, l] = rem % A
            rem //= A
        out = np.zeros((n_states, A), dtype=np.complex128)
        out += cir.taps[0] * self.alphabet[None, :]
        for l in range(1, L + 1):
            out += (cir.taps[l] * self.alphabet[digits[:, l - 1]])[:, None]
        self.branch_output = out
        if L > 0:
            nxt = (np.arange(A)[None, :] + (states % (A ** (L - 1)))[:, None] * A)
        else:
            nxt = np.zeros((1, A), dtype=np.int64)
        self.next_state = nxt.astype(np.int64)
        # incoming transitions grouped by destination state
        flat_next = self.next_state.ravel()
        order = np.argsort(flat_next, kind="stable")
        self.incoming_flat = order.reshape(n_states, -1) if L > 0 else order.reshape(1, A)

    def outgoing_count(self):
        return self.next_state.shape[1]


def bcjr_detect_batch(ys, cir, sigma2, constellation, prior_bit_llrs=None,
                      state_budget=2_000_000):
    """Exact bitwise posterior LLRs for a batch of frames.

    ``ys``: (B, n_sym + L) observations.  ``prior_bit_llrs``: optional
    (B, n_sym * k) per-bit priors.  Returns (B, n_sym * k) total LLRs.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=np.complex128))
    B, n_obs = ys.shape
    L = cir.memory
    n_sym = n_obs - L
    if n_sym < 1:
        raise ValueError("observation vector shorter than the channel memory")
    M = constellation.order
    k = constellation.bits_per_symbol
    trellis = Trellis(cir, constellation, state_budget)
    A = M + 1
    S = trellis.n_states
    sigma2_eff = max(float(sigma2), 1e-30)

    # per-position symbol log priors over the augmented alphabet
    logp = np.full((B, n_obs, A), -np.inf)
    if prior_bit_llrs is not None:
        pr = np.asarray(prior_bit_llrs, dtype=np.float64).reshape(B, n_sym, k)
        logp[:, :n_sym, 1:] = bit_prior_to_symbol_logp(pr, constellation)
    else:
        logp[:, :n_sym, 1:] = 0.0
    logp[:, n_sym:, :] = -np.inf
    logp[:, n_sym:, 0] = 0.0  # tail symbols are known zeros

    # gamma[b, i, s, a] computed stage by stage
    branch = trellis.branch_output  # (S, A)
    alphas = np.full((n_obs + 1, B, S), -np.inf)
    alphas[0, :, 0] = 0.0
    gammas = np.empty((n_obs, B, S, A))
    for i in range(n_obs):
        d2 = np.abs(ys[:, i, None, None] - branch[None, :, :]) ** 2
        gammas[i] = -d2 / sigma2_eff + logp[:, i, None, :]
        t = alphas[i][:, :, None] + gammas[i]  # (B, S, A)
        flat = t.reshape(B, S * A)
        grouped = flat[:, trellis.incoming_flat.reshape(-1)].reshape(B, S, A)
        alphas[i + 1] = _lse_last(grouped)

    beta = np.zeros((B, S))
    post = np.empty((B, n_sym, M))
    for i in range(n_obs - 1, -1, -1):
        t = gammas[i] + beta[:, trellis.next_state.ravel()].reshape(B, S, A)
        if i < n_sym:
            joint = alphas[i][:, :, None] + t  # (B, S, A)
            post[:, i, :] = _lse_mid(joint[:, :, 1:])
        beta = _lse_last(t)

    post -= np.max(post, axis=-1, keepdims=True)
    return symbol_logp_to_bit_llrs(post, constellation).reshape(B, n_sym * k)


def _lse_last(a):
    m = np.max(a, axis=-1, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (safe + np.log(np.sum(np.exp(a - safe), axis=-1, keepdims=True))).squeeze(-1)


def _lse_mid(a):
    # logsumexp over axis 1 of (B, S, M)
    m = np.max(a, axis=1, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (safe + np.log(np.sum(np.exp(a - safe), axis=1, keepdims=True))).squeeze(1)


def bcjr_detect(y, cir, sigma2, constellation, prior_bit_llrs=None,
                state_budget=2_000_000):
    """Single-frame BCJR; see :func:`bcjr_detect_batch`."""
    priors = None if prior_bit_llrs is None else np.atleast_2d(_llr_values(prior_bit_llrs))
    out = bcjr_detect_batch(np.atleast_2d(y), cir, sigma2, constellation,
                            priors, state_budget)
    return LlrVector(out[0], role="total")


def _llr_values(llrs):
    return llrs.values if isinstance(llrs, LlrVector) else np.asarray(llrs, dtype=np.float64)


# -- SPA on the observation (FFG) graph ------------------------------------


@dataclass
class SpaResult:
    """Per-iteration LLR snapshots plus divergence bookkeeping."""

    llrs_per_iteration: list = field(default_factory=list)
    diverged: bool = False
    divergence_iteration: int | None = None

    @property
    def final(self):
        return LlrVector(clip_llr(self.llrs_per_iteration[-1]), role="total")


class _DivergenceMonitor:
    """Flags loopy-SPA divergence from the hard-decision flip fraction.

    Converging runs drive the fraction of sign flips between consecutive
    iterations toward zero; oscillating/amplifying runs either keep it
    high or let it regrow after an initial dip.  Non-finite values or
    runaway magnitudes flag immediately.
    """

    FLIP_CEILING = 0.5
    REGROWTH_ABS = 0.02
    REGROWTH_REL = 1.2

    def __init__(self, magnitude_limit):
        self.magnitude_limit = magnitude_limit
        self.prev_signs = None
        self.min_flip = None
        self.iterations_seen = 0
        self.diverged = False
        self.iteration = None

    def update(self, llrs):
        self.iterations_seen += 1
        it = self.iterations_seen
        bad = (not np.all(np.isfinite(llrs))) or np.max(np.abs(llrs)) > self.magnitude_limit
        signs = llrs < 0
        if self.prev_signs is not None and not bad:
            flip = float(np.mean(signs != self.prev_signs))
            if it >= 2 and flip >= self.FLIP_CEILING:
                bad = True
            elif self.min_flip is not None and it >= 3:
                if flip > self.min_flip + self.REGROWTH_ABS and flip > self.REGROWTH_REL * self.min_flip:
                    bad = True
            self.min_flip = flip if self.min_flip is None else min(self.min_flip, flip)
        self.prev_signs = signs
        if bad and not self.diverged:
            self.diverged = True
            self.iteration = it


def spa_detect(graph, inputs, sigma2, constellation, cir=None, damping=1.0,
               n_iterations=10, prior_bit_llrs=None, divergence_limit=1e4):
    """Damped sum-product detection on an FFG or UFG.

    FFG inputs are the observations ``y`` (requires ``cir``); UFG inputs
    are the matched-filter pair ``(G, chi)``.  New messages are blended as
    ``damping * new + (1 - damping) * old`` in the log domain, both
    directions.  Returns per-iteration total bit LLR snapshots; the
    divergence flag trips once LLR magnitudes pass ``divergence_limit`` or
    stop being finite.
    """
    if not (0.0 < damping <= 1.0):
        raise ValueError("damping must be in (0, 1]")
    if graph.kind == "ffg":
        if cir is None:
            raise ValueError("FFG detection needs the channel impulse response")
        return _spa_ffg(graph, np.asarray(inputs), sigma2, constellation, cir,
                        damping, n_iterations, prior_bit_llrs, divergence_limit)
    if graph.kind == "ufg":
        G, chi = inputs
        return _spa_ufg(graph, G, chi, sigma2, constellation, damping,
                        n_iterations, prior_bit_llrs, divergence_limit)
    raise ValueError(f"SPA detection expects an FFG or UFG, got {graph.kind!r}")


def _spa_ffg(graph, ys, sigma2, constellation, cir, damping, n_iterations,
             prior_bit_llrs, divergence_limit):
    single = ys.ndim == 1
    ys = np.atleast_2d(ys)
    B, n_obs = ys.shape
    L = graph.meta["memory"]
    n_sym = graph.meta["n_sym"]
    M = constellation.order
    k = constellation.bits_per_symbol
    sigma2_eff = max(float(sigma2), 1e-30)
    n_vn = graph.num_vn

    # combos[c, slot] = symbol index of neighbor slot (slot s <-> VN f+s)
    n_slot = L + 1
    combos = np.indices((M,) * n_slot).reshape(n_slot, -1).T  # (C, n_slot)
    C = combos.shape[0]
    virtual = graph.vn_flags == VN_VIRTUAL

    # noiseless FN outputs per combo, with virtual slots forced to zero
    points = constellation.points
    out = np.zeros((n_obs, C), dtype=np.complex128)
    for slot in range(n_slot):
        tap = cir.taps[L - slot]
        vals = points[combos[:, slot]]
        mask = ~virtual[np.arange(n_obs) + slot]
        out += tap * np.where(mask[:, None], vals[None, :], 0.0)
    log_g = -np.abs(ys[:, :, None] - out[None, :, :]) ** 2 / sigma2_eff

    # per-VN symbol priors (payload only; virtual slots stay uniform)
    prior = np.zeros((B, n_vn, M))
    if prior_bit_llrs is not None:
        pr = np.atleast_2d(_llr_values(prior_bit_llrs)).reshape(B, n_sym, k)
        prior[:, L:L + n_sym, :] = bit_prior_to_symbol_logp(pr, constellation)

    slot_virtual = np.zeros((n_obs, n_slot), dtype=bool)
    for slot in range(n_slot):
        slot_virtual[:, slot] = virtual[np.arange(n_obs) + slot]

    # combo grouping per slot: combo indices sorted by the symbol at slot
    group = np.empty((n_slot, M, C // M), dtype=np.int64)
    for slot in range(n_slot):
        for m in range(M):
            group[slot, m] = np.flatnonzero(combos[:, slot] == m)

    m_fv = np.zeros((B, n_obs, n_slot, M))
    m_vf = np.empty_like(m_fv)
    for slot in range(n_slot):
        m_vf[:, :, slot, :] = prior[:, slot:slot + n_obs, :]
    m_vf[:, slot_virtual, :] = 0.0
    m_vf -= m_vf.max(axis=-1, keepdims=True)

    result = SpaResult()
    monitor = _DivergenceMonitor(divergence_limit)
    payload_slice = slice(L, L + n_sym)
    for it in range(n_iterations):
        # FN -> VN: marginalize the local table against incoming messages
        w = log_g.copy()
        for slot in range(n_slot):
            w += m_vf[:, np.arange(n_obs)[:, None], slot, combos[:, slot][None, :]]
        new_fv = np.empty_like(m_fv)
        for slot in range(n_slot):
            excl = w[:, :, group[slot].reshape(-1)].reshape(B, n_obs, M, C // M)
            own = m_vf[:, :, slot, :]  # (B, F, M)
            sub = excl - own[:, :, :, None]
            new_fv[:, :, slot, :] = _lse_last(sub)
        new_fv -= new_fv.max(axis=-1, keepdims=True)
        m_fv = damping * new_fv + (1.0 - damping) * m_fv

        # VN totals via shifted accumulation
        belief = prior.copy()
        for slot in range(n_slot):
            belief[:, slot:slot + n_obs, :] += m_fv[:, :, slot, :]

        # VN -> FN: total minus own incoming
        new_vf = np.empty_like(m_vf)
        for slot in range(n_slot):
            new_vf[:, :, slot, :] = belief[:, slot:slot + n_obs, :] - m_fv[:, :, slot, :]
        new_vf -= new_vf.max(axis=-1, keepdims=True)
        new_vf[:, slot_virtual, :] = 0.0
        m_vf = damping * new_vf + (1.0 - damping) * m_vf
        m_vf[:, slot_virtual, :] = 0.0

        payload_belief = belief[:, payload_slice, :]
        payload_belief = payload_belief - payload_belief.max(axis=-1, keepdims=True)
        llrs = symbol_logp_to_bit_llrs(payload_belief, constellation).reshape(B, n_sym * k)
        result.llrs_per_iteration.append(llrs[0] if single else llrs)
        monitor.update(llrs)
    result.diverged = monitor.diverged
    result.divergence_iteration = monitor.iteration
    return result


def _spa_ufg(graph, G, chi, sigma2, constellation, damping, n_iterations,
             prior_bit_llrs, divergence_limit):
    n_sym = graph.meta["n_sym"]
    L = graph.meta["memory"]
    pairs = graph.meta["pairs"]
    M = constellation.order
    k = constellation.bits_per_symbol
    sigma2_eff = max(float(sigma2), 1e-30)
    points = constellation.points
    G = np.asarray(G, dtype=np.complex128)
    chi = np.asarray(chi, dtype=np.complex128)
    offset = (chi.size - n_sym) // 2
    chi_p = chi[offset:offset + n_sym]
    g_diag = np.real(np.diag(G))[offset:offset + n_sym]

    prior = (2.0 * np.real(np.conj(points)[None, :] * chi_p[:, None])
             - g_diag[:, None] * np.abs(points[None, :]) ** 2) / sigma2_eff
    if prior_bit_llrs is not None:
        pr = _llr_values(prior_bit_llrs).reshape(n_sym, k)
        prior = prior + bit_prior_to_symbol_logp(pr, constellation)

    F = len(pairs)
    result = SpaResult()
    if F == 0:
        llrs = symbol_logp_to_bit_llrs(prior - prior.max(-1, keepdims=True),
                                       constellation).ravel()
        result.llrs_per_iteration = [llrs] * max(n_iterations, 1)
        return result

    pair_i = np.array([p[0] for p in pairs])
    pair_j = np.array([p[1] for p in pairs])
    g_ij = G[pair_i + offset, pair_j + offset]
    # log factor table per FN: (F, M_i, M_j)
    cross = np.real(np.conj(points)[:, None] * g_ij[:, None, None] * points[None, :])
    log_f = -2.0 * cross / sigma2_eff

    m_vf = np.zeros((F, 2, M))
    m_vf[:, 0, :] = prior[pair_i]
    m_vf[:, 1, :] = prior[pair_j]
    m_vf -= m_vf.max(-1, keepdims=True)
    m_fv = np.zeros((F, 2, M))
    monitor = _DivergenceMonitor(divergence_limit)

    for it in range(n_iterations):
        new_fv = np.empty_like(m_fv)
        new_fv[:, 1, :] = _lse_mid(log_f + m_vf[:, 0, :, None])
        new_fv[:, 0, :] = _lse_mid(np.swapaxes(log_f, 1, 2) + m_vf[:, 1, :, None])
        new_fv -= new_fv.max(-1, keepdims=True)
        m_fv = damping * new_fv + (1.0 - damping) * m_fv

        belief = prior.copy()
        np.add.at(belief, pair_i, m_fv[:, 0, :])
        np.add.at(belief, pair_j, m_fv[:, 1, :])

        new_vf = np.empty_like(m_vf)
        new_vf[:, 0, :] = belief[pair_i] - m_fv[:, 0, :]
        new_vf[:, 1, :] = belief[pair_j] - m_fv[:, 1, :]
        new_vf -= new_vf.max(-1, keepdims=True)
        m_vf = damping * new_vf + (1.0 - damping) * m_vf

        b = belief - belief.max(-1, keepdims=True)
        llrs = symbol_logp_to_bit_llrs(b, constellation).ravel()
        result.llrs_per_iteration.append(llrs)
        if not result.diverged:
            bad = (not np.all(np.isfinite(llrs))) or np.max(np.abs(llrs)) > divergence_limit
            if bad:
                result.diverged = True
                result.divergence_iteration = it + 1
    return result


# -- block LMMSE ------------------------------------------------------------


def lmmse_detect(y, H, sigma2, constellation):
    """Block MMSE equalization followed by memoryless soft demapping.

    Residual interference is treated as Gaussian; a zero noise variance is
    floored (and flagged in the result) to keep the solve well posed.
    """
    y = np.asarray(y, dtype=np.complex128)
    H = np.asarray(H, dtype=np.complex128)
    n_obs, n_pad = H.shape
    L = n_pad - n_obs  # zero padding of width L on each side
    if y.shape[0] != n_obs:
        raise ValueError("y length does not match H")
    flagged = False
    sigma2_eff = float(sigma2)
    if sigma2_eff < 1e-12:
        sigma2_eff = 1e-12
        flagged = True
    Gram = H.conj().T @ H + sigma2_eff * np.eye(n_pad)
    W = np.linalg.solve(Gram, H.conj().T)
    x_hat = W @ y
    bias = W @ H  # (n_pad, n_pad); diagonal = per-symbol signal gain
    mu = np.real(np.diag(bias))
    resid = np.sum(np.abs(bias) ** 2, axis=1) - mu**2
    noise_cov = sigma2_eff * np.real(np.sum(W * W.conj(), axis=1))
    nu = np.maximum(resid + noise_cov, 1e-15)

    n_sym = n_pad - 2 * L
    payload = slice(L, L + n_sym)
    x_p, mu_p, nu_p = x_hat[payload], mu[payload], nu[payload]

    points = constellation.points
    d2 = np.abs(x_p[:, None] - mu_p[:, None] * points[None, :]) ** 2
    logp = -d2 / nu_p[:, None]
    llrs = symbol_logp_to_bit_llrs(logp, constellation).ravel()
    return LlrVector(llrs, role="total"), {"flagged": flagged, "gain": mu_p, "nu": nu_p}


def lmmse_detect_from_cir(y, cir, sigma2, constellation):
    n_sym = np.asarray(y).shape[0] - cir.memory
    H = build_channel_matrix(cir, n_sym)
    return lmmse_detect(y, H, sigma2, constellation)
