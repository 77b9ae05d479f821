"""Inner loops of the forward-backward and Viterbi recursions.

Each kernel has a scalar-loop version compiled with numba and a vectorised
numpy version.  ``fb_kernel`` / ``viterbi_kernel`` dispatch on
:data:`lfmmi._jit.JIT_DISABLED`; both paths are importable directly so tests
and the benchmark can compare them.

Graph arguments are flat arrays: ``src``, ``dst``, ``pdf`` (int64) and
``w`` (arc probabilities) / ``logw`` (arc log weights), plus per-state final
weights.  A failed recursion (no surviving path) returns ``-inf`` as the
log-probability; callers turn that into an exception.
"""
import numpy as np

from ._jit import JIT_DISABLED, njit

NEG_INF = -np.inf


@njit
def _fb_jit(src, dst, pdf, w, final, start, num_states, o, leak, pi):
    T, P = o.shape
    E = src.shape[0]
    gamma = np.zeros((T, P))
    logc = np.zeros(T)
    atil = np.zeros((T, num_states))
    ex = np.empty((T, P))
    for t in range(T):
        m = o[t, 0]
        for p in range(1, P):
            if o[t, p] > m:
                m = o[t, p]
        for p in range(P):
            ex[t, p] = np.exp(o[t, p] - m)
        logc[t] = m

    a = np.zeros(num_states)
    a[start] = 1.0
    nxt = np.zeros(num_states)
    for t in range(T):
        if leak > 0.0:
            tot = 0.0
            for s in range(num_states):
                tot += a[s]
            for s in range(num_states):
                a[s] += leak * pi[s] * tot
        for s in range(num_states):
            atil[t, s] = a[s]
            nxt[s] = 0.0
        for e in range(E):
            nxt[dst[e]] += a[src[e]] * w[e] * ex[t, pdf[e]]
        c = 0.0
        for s in range(num_states):
            c += nxt[s]
        if not c > 0.0:
            return NEG_INF, gamma, logc
        logc[t] += np.log(c)
        for s in range(num_states):
            a[s] = nxt[s] / c
    fin = 0.0
    for s in range(num_states):
        fin += a[s] * final[s]
    if not fin > 0.0:
        return NEG_INF, gamma, logc
    logprob = np.log(fin)
    for t in range(T):
        logprob += logc[t]

    b = final.copy()
    bs = 0.0
    for s in range(num_states):
        bs += b[s]
    for s in range(num_states):
        b[s] /= bs
    u = np.zeros(num_states)
    for t in range(T - 1, -1, -1):
        total = 0.0
        for s in range(num_states):
            u[s] = 0.0
        for e in range(E):
            v = w[e] * ex[t, pdf[e]] * b[dst[e]]
            u[src[e]] += v
            v *= atil[t, src[e]]
            gamma[t, pdf[e]] += v
            total += v
        for p in range(P):
            gamma[t, p] /= total
        if leak > 0.0:
            dot = 0.0
            for s in range(num_states):
                dot += pi[s] * u[s]
            for s in range(num_states):
                u[s] += leak * dot
        us = 0.0
        for s in range(num_states):
            us += u[s]
        for s in range(num_states):
            b[s] = u[s] / us
    return logprob, gamma, logc


def _fb_numpy(src, dst, pdf, w, final, start, num_states, o, leak, pi):
    T, P = o.shape
    m = o.max(axis=1)
    ex = np.exp(o - m[:, None])
    logc = m.copy()
    gamma = np.zeros((T, P))
    atil = np.zeros((T, num_states))
    a = np.zeros(num_states)
    a[start] = 1.0
    for t in range(T):
        if leak > 0.0:
            a = a + leak * pi * a.sum()
        atil[t] = a
        nxt = np.bincount(dst, weights=a[src] * w * ex[t, pdf], minlength=num_states)
        c = nxt.sum()
        if not c > 0.0:
            return NEG_INF, gamma, logc
        logc[t] += np.log(c)
        a = nxt / c
    fin = a @ final
    if not fin > 0.0:
        return NEG_INF, gamma, logc
    logprob = np.log(fin) + logc.sum()

    b = final / final.sum()
    for t in range(T - 1, -1, -1):
        v = w * ex[t, pdf] * b[dst]
        u = np.bincount(src, weights=v, minlength=num_states)
        occ = np.bincount(pdf, weights=v * atil[t, src], minlength=P)
        gamma[t] = occ / occ.sum()
        if leak > 0.0:
            u = u + leak * (pi @ u)
        b = u / u.sum()
    return logprob, gamma, logc


def fb_kernel(src, dst, pdf, w, final, start, num_states, o, leak, pi):
    """Scaled forward-backward; returns ``(logprob, occupancies, log_scales)``."""
    impl = _fb_numpy if JIT_DISABLED else _fb_jit
    return impl(src, dst, pdf, w, final, start, num_states, o, leak, pi)


@njit
def _viterbi_jit(src, dst, pdf, logw, final_logw, start, num_states, o, order):
    T = o.shape[0]
    delta = np.full(num_states, NEG_INF)
    delta[start] = 0.0
    new = np.empty(num_states)
    bp = np.full((T, num_states), -1, dtype=np.int64)
    for t in range(T):
        new[:] = NEG_INF
        for k in range(order.shape[0]):
            e = order[k]
            s = delta[src[e]] + logw[e] + o[t, pdf[e]]
            if s > new[dst[e]]:
                new[dst[e]] = s
                bp[t, dst[e]] = e
        delta[:] = new
    best = NEG_INF
    state = -1
    for s in range(num_states):
        v = delta[s] + final_logw[s]
        if v > best:
            best = v
            state = s
    path = np.full(T, -1, dtype=np.int64)
    if state < 0:
        return best, path
    for t in range(T - 1, -1, -1):
        e = bp[t, state]
        path[t] = e
        state = src[e]
    return best, path


def _viterbi_numpy(src, dst, pdf, logw, final_logw, start, num_states, o, order):
    T = o.shape[0]
    E = src.shape[0]
    rank = np.empty(E, dtype=np.int64)
    rank[order] = np.arange(E)
    delta = np.full(num_states, NEG_INF)
    delta[start] = 0.0
    bp = np.full((T, num_states), -1, dtype=np.int64)
    for t in range(T):
        scores = delta[src] + logw + o[t, pdf]
        # best arc per destination; ties go to the earliest arc in ``order``
        idx = np.lexsort((rank, -scores, dst))
        dsts, first = np.unique(dst[idx], return_index=True)
        win = idx[first]
        new = np.full(num_states, NEG_INF)
        new[dsts] = scores[win]
        live = np.isfinite(new[dsts])
        bp[t, dsts[live]] = win[live]
        delta = new
    tot = delta + final_logw
    path = np.full(T, -1, dtype=np.int64)
    if not np.isfinite(tot).any():
        return NEG_INF, path
    state = int(np.argmax(tot))  # argmax returns the first (smallest id) maximum
    best = tot[state]
    for t in range(T - 1, -1, -1):
        e = bp[t, state]
        path[t] = e
        state = src[e]
    return best, path


def viterbi_kernel(src, dst, pdf, logw, final_logw, start, num_states, o, order):
    """Best path; returns ``(score, arc index per frame)``."""
    impl = _viterbi_numpy if JIT_DISABLED else _viterbi_jit
    return impl(src, dst, pdf, logw, final_logw, start, num_states, o, order)
