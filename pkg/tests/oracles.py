"""Independent reference computations used by the tests."""
import itertools
import math
from collections import deque
from functools import lru_cache

import numpy as np


def accepts(g, pdf_seq):
    """Subset simulation: does ``g`` accept the pdf sequence (any weight > 0)?"""
    cur = {g.start}
    for p in pdf_seq:
        cur = {d for s, d, q, lw in g.arcs() if s in cur and q == p and lw > -math.inf}
    return any(g.final_logw[s] > -math.inf for s in cur)


def accepted_sequences(g, T):
    return {seq for seq in itertools.product(range(g.num_pdfs), repeat=T) if accepts(g, seq)}


def path_weights(g, T):
    """pdf sequence -> list of path log-weights (graph weights only) for all length-T paths."""
    out = {}
    arcs = list(g.arcs())

    def walk(s, t, seq, acc):
        if t == T:
            if g.final_logw[s] > -math.inf:
                out.setdefault(tuple(seq), []).append(acc + g.final_logw[s])
            return
        for a, d, p, lw in arcs:
            if a == s:
                walk(d, t + 1, seq + [p], acc + lw)

    walk(g.start, 0, [], 0.0)
    return out


def coreachable(g):
    rev = {s: set() for s in range(g.num_states)}
    for s, d, _, _ in g.arcs():
        if 0 <= d < g.num_states:
            rev[d].add(s)
    seen = {s for s in range(g.num_states) if g.final_logw[s] > -math.inf}
    q = deque(seen)
    while q:
        s = q.popleft()
        for r in rev[s]:
            if r not in seen:
                seen.add(r)
                q.append(r)
    return seen


def best_path_enum(g, o, scale=1.0):
    """Exhaustive max over length-T arc paths: ``(score, arc list)``."""
    T = o.shape[0]
    arcs = list(g.arcs())
    best = (-math.inf, None)

    def walk(s, t, path, acc):
        nonlocal best
        if t == T:
            fw = g.final_logw[s]
            if fw > -math.inf and acc + fw > best[0]:
                best = (acc + fw, list(path))
            return
        for e, (a, d, p, lw) in enumerate(arcs):
            if a == s:
                path.append(e)
                walk(d, t + 1, path, acc + lw + scale * o[t, p])
                path.pop()

    walk(g.start, 0, [], 0.0)
    return best


def edit_distance(ref, hyp):
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

    return d(len(ref), len(hyp))


def stationary_eig(M):
    """Left eigenvector of ``M`` for eigenvalue 1, normalised to sum 1."""
    vals, vecs = np.linalg.eig(M.T)
    k = int(np.argmin(np.abs(vals - 1.0)))
    v = np.real(vecs[:, k])
    return v / v.sum()


def ark_record(key, m):
    """Hand-assembled binary float-matrix record."""
    m = np.asarray(m, dtype=np.float32)
    out = bytearray(key.encode("ascii"))
    out += bytes([0x20, 0x00, ord("B"), ord("F"), ord("M"), ord(" ")])
    for dim in m.shape:
        out.append(4)
        out += int(dim).to_bytes(4, "little", signed=True)
    for v in m.ravel():
        out += np.float32(v).tobytes() if np.little_endian else np.float32(v).byteswap().tobytes()
    return bytes(out)
