"""LF-MMI objective over numerator and denominator graphs.

The objective for one sequence of ``T`` output frames is

    F = (log p_num(o) - log p_den(o)) / T

where each term is a full path-sum computed by scaled forward-backward.  The
denominator recursion is "leaky": before every frame a fraction ``lambda`` of
the total forward mass is re-injected into all states according to a fixed
distribution ``pi``.  The gradient of ``F`` w.r.t. the network output is the
difference of the two occupancy matrices, divided by ``T``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .graph import LeakyInit, Wfsa
from .kernels import fb_kernel


class EmptyCompositionError(ValueError):
    """The graph accepts no path of the requested length."""

    def __init__(self, msg="empty composition", which=None):
        self.which = which
        super().__init__(msg if which is None else f"{msg} ({which} graph)")


@dataclass(frozen=True)
class ChainOpts:
    """Training options for the chain objective.

    Defaults follow common LF-MMI practice: leaky-HMM coefficient 0.1,
    cross-entropy weight 0.1 and L2 output penalty 5e-5.
    """

    leaky_hmm_coefficient: float = 0.1
    xent_regularize: float = 0.1
    l2_regularize: float = 5e-5

    def __post_init__(self):
        if min(self.leaky_hmm_coefficient, self.xent_regularize, self.l2_regularize) < 0:
            raise ValueError("chain options must be non-negative")
        if self.leaky_hmm_coefficient >= 1:
            raise ValueError("leaky_hmm_coefficient must be < 1")


@dataclass
class FbResult:
    logprob: float
    occupancies: np.ndarray
    per_frame_lognorm: np.ndarray


@dataclass
class ChainLossOutput:
    objf_mmi: float
    objf_xent: float
    objf_l2: float
    grad: np.ndarray
    xent_grad: np.ndarray | None = None
    num_frames: int = 0

    @property
    def objf(self):
        return self.objf_mmi + self.objf_l2


def forward_backward(g: Wfsa, o, leaky=None, which=None) -> FbResult:
    """Scaled forward-backward of ``g`` against the loglike matrix ``o``.

    ``leaky`` is ``(lambda, LeakyInit)`` or None.  Raises
    :class:`EmptyCompositionError` when no length-``T`` path has non-zero weight.
    """
    o = np.ascontiguousarray(o, dtype=np.float64)
    if o.ndim != 2 or o.shape[1] != g.num_pdfs:
        raise ValueError(f"loglikes must be T x {g.num_pdfs}, got {o.shape}")
    if not np.isfinite(o).all():
        raise ValueError("loglikes contain non-finite values")
    if o.shape[0] == 0:
        raise ValueError("loglikes have no frames")
    lam = 0.0
    pi = np.zeros(g.num_states)
    if leaky is not None:
        lam, init = leaky
        pi = init.pi if isinstance(init, LeakyInit) else np.asarray(init, dtype=np.float64)
        if pi.shape != (g.num_states,):
            raise ValueError("leak distribution dimension differs from num_states")
    w, final = g.prob_arrays()
    logprob, gamma, logc = fb_kernel(g.src, g.dst, g.pdf, w, final, g.start, g.num_states,
                                     o, float(lam), np.ascontiguousarray(pi, dtype=np.float64))
    if not np.isfinite(logprob):
        raise EmptyCompositionError(which=which)
    return FbResult(float(logprob), gamma, logc)


def brute_force_logprob(g: Wfsa, o, max_states=8, max_frames=8) -> float:
    """Exhaustive path-sum; returns ``-inf`` if no path of length ``T`` exists."""
    o = np.asarray(o, dtype=np.float64)
    T = o.shape[0]
    if g.num_states > max_states or T > max_frames:
        raise ValueError("oracle size limit")
    out = [[] for _ in range(g.num_states)]
    for s, d, p, lw in g.arcs():
        out[s].append((d, p, lw))
    scores = []

    def walk(state, t, acc):
        if t == T:
            fw = g.final_logw[state]
            if fw > -math.inf:
                scores.append(acc + fw)
            return
        for d, p, lw in out[state]:
            if lw > -math.inf:
                walk(d, t + 1, acc + lw + o[t, p])

    walk(g.start, 0, 0.0)
    if not scores:
        return -math.inf
    s = np.array(scores)
    m = s.max()
    return float(m + math.log(math.fsum(np.exp(s - m))))


def _log_softmax(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def chain_loss(num: Wfsa, den: Wfsa, pi: LeakyInit, o, opts: ChainOpts = ChainOpts(),
               xent_out=None) -> ChainLossOutput:
    """LF-MMI objective (to be maximised) and its gradient w.r.t. ``o``.

    The returned ``grad`` is d(objf_mmi + objf_l2)/do.  When ``xent_out`` is
    given, ``xent_grad`` is ``xent_regularize`` times d(objf_xent)/d(xent_out);
    the cross-entropy targets are the numerator occupancies.
    """
    o = np.asarray(o, dtype=np.float64)
    if num.num_pdfs != o.shape[1] or den.num_pdfs != o.shape[1]:
        raise ValueError("graphs and loglikes disagree on num_pdfs")
    T = o.shape[0]
    fb_num = forward_backward(num, o, None, which="numerator")
    lam = opts.leaky_hmm_coefficient
    fb_den = forward_backward(den, o, (lam, pi) if lam > 0 else None, which="denominator")
    objf_mmi = (fb_num.logprob - fb_den.logprob) / T
    grad = (fb_num.occupancies - fb_den.occupancies) / T
    objf_l2 = 0.0
    if opts.l2_regularize > 0:
        objf_l2 = -0.5 * opts.l2_regularize / T * float(np.sum(o * o))
        grad -= (opts.l2_regularize / T) * o
    objf_xent = 0.0
    xent_grad = None
    if xent_out is not None:
        x = np.asarray(xent_out, dtype=np.float64)
        if x.shape != o.shape:
            raise ValueError("xent_out shape differs from loglikes")
        lsm = _log_softmax(x)
        objf_xent = float(np.sum(fb_num.occupancies * lsm)) / T
        rows = fb_num.occupancies.sum(axis=1, keepdims=True)
        xent_grad = opts.xent_regularize * (fb_num.occupancies - np.exp(lsm) * rows) / T
    return ChainLossOutput(objf_mmi, objf_xent, objf_l2, grad, xent_grad, T)


def chain_loss_batch(items, den: Wfsa, pi: LeakyInit, opts: ChainOpts = ChainOpts(),
                     max_workers=None):
    """Evaluate ``chain_loss`` over ``(num, o, xent_out)`` items.

    Sequences are independent, so they may run on a thread pool; results keep
    input order.  Returns the list of outputs and the summed
    ``(objf_mmi, objf_xent, objf_l2)`` weighted by frame count.
    """
    def one(item):
        num, o, x = item
        return chain_loss(num, den, pi, o, opts, x)

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as ex:
            outs = list(ex.map(one, items))
    else:
        outs = [one(it) for it in items]
    tot = [0.0, 0.0, 0.0]
    for r in outs:
        tot[0] += r.objf_mmi * r.num_frames
        tot[1] += r.objf_xent * r.num_frames
        tot[2] += r.objf_l2 * r.num_frames
    return outs, tuple(tot)


def grad_check_chain(num, den, pi, o, opts: ChainOpts = ChainOpts(), eps=1e-4) -> float:
    """Max relative error between the analytic gradient and central differences
    of ``objf_mmi + objf_l2``."""
    o = np.array(o, dtype=np.float64)
    if o.size > 200:
        raise ValueError("grad check limited to T*P <= 200")
    analytic = chain_loss(num, den, pi, o, opts).grad
    worst = 0.0
    for idx in np.ndindex(*o.shape):
        orig = o[idx]
        o[idx] = orig + eps
        fp = chain_loss(num, den, pi, o, opts).objf
        o[idx] = orig - eps
        fm = chain_loss(num, den, pi, o, opts).objf
        o[idx] = orig
        numeric = (fp - fm) / (2 * eps)
        a = analytic[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
