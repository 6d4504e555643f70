"""Pure-numpy CTC kernels; same contract as the compiled ``_ckernels`` module.

``logp`` is a C-contiguous float64 array of log-probabilities ``[K, T]``;
``ext`` is the blank-interleaved label sequence (int64, length ``S = 2L + 1``).
"""

import numpy as np

LOG_ZERO = -1.0e30


def _skip_mask(ext):
    # s-2 -> s is allowed only into a non-blank state differing from ext[s-2]
    S = ext.shape[0]
    ok = np.zeros(S, dtype=bool)
    if S > 2:
        ok[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    return ok


def forward_backward(logp, ext):
    """Return ``(log_alpha, log_beta, log_likelihood)``.

    ``log_alpha[s, t]`` includes the emission at ``t``; ``log_beta[s, t]`` covers
    frames ``t+1 .. T-1`` only.
    """
    S = ext.shape[0]
    T = logp.shape[1]
    emit = logp[ext, :]
    skip = _skip_mask(ext)
    alpha = np.full((S, T), LOG_ZERO)
    beta = np.full((S, T), LOG_ZERO)

    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[1, 0] = emit[1, 0]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[:, t] = np.maximum(acc + emit[:, t], LOG_ZERO)

    beta[S - 1, T - 1] = 0.0
    if S > 1:
        beta[S - 2, T - 1] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[:, t] = np.maximum(acc, LOG_ZERO)

    ll = np.logaddexp(alpha[S - 1, T - 1], alpha[S - 2, T - 1]) if S > 1 else alpha[0, T - 1]
    return alpha, beta, float(ll)


def ctc_fb(logp, ext):
    """Return ``(log_likelihood, occupancy)`` with occupancy ``[K, T]``.

    ``occupancy[k, t]`` is the posterior probability that frame ``t`` emits
    symbol ``k`` under the label-constrained path distribution.
    """
    alpha, beta, ll = forward_backward(logp, ext)
    gamma = np.exp(alpha + beta - ll)
    occ = np.zeros(logp.shape, dtype=np.float64)
    np.add.at(occ, ext, gamma)
    return ll, occ


def viterbi(logp, ext):
    """Best state path (length ``T``), ties resolved toward the more advanced state.

    A backward pass computes the best completion score from every
    ``(state, frame)``; a forward greedy walk then picks, at every frame, the
    highest-scoring successor, preferring the larger state index on ties.
    """
    S = ext.shape[0]
    T = logp.shape[1]
    emit = logp[ext, :]
    skip = _skip_mask(ext)
    best = np.full((S, T), LOG_ZERO)
    best[S - 1, T - 1] = 0.0
    if S > 1:
        best[S - 2, T - 1] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = best[:, t + 1] + emit[:, t + 1]
        acc = nxt.copy()
        acc[:-1] = np.maximum(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.maximum(acc[:-2], nxt[2:]), acc[:-2])
        best[:, t] = np.maximum(acc, LOG_ZERO)

    path = np.empty(T, dtype=np.int64)
    score = emit[:, 0] + best[:, 0]
    s = 1 if S > 1 and score[1] >= score[0] else 0
    path[0] = s
    for t in range(1, T):
        choice = s
        val = emit[s, t] + best[s, t]
        if s + 1 < S:
            v = emit[s + 1, t] + best[s + 1, t]
            if v >= val:
                choice, val = s + 1, v
        if s + 2 < S and skip[s + 2]:
            v = emit[s + 2, t] + best[s + 2, t]
            if v >= val:
                choice, val = s + 2, v
        s = choice
        path[t] = s
    return path
