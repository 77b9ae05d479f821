"""Natural-gradient preconditioning, plain SGD, Adam and the LR schedule.

The natural-gradient preconditioner keeps, per side of an affine layer, a
running estimate ``S`` of the covariance of the rows it sees (inputs, or
output derivatives).  A batch ``X`` is multiplied by
``(S + alpha * tr(S)/dim * I)^-1`` and rescaled to its original Frobenius
norm, so only the direction of the update changes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class NgState:
    dim: int
    num_samples_history: float = 2000.0
    alpha: float = 4.0
    cov: np.ndarray = None
    frames_seen: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.cov is None:
            self.cov = np.zeros((self.dim, self.dim))


def ng_precondition(state: NgState, x):
    """Precondition the rows of ``x``; returns ``(x_hat, new_state)``.

    ``state`` is not modified.
    """
    x = np.asarray(x, dtype=np.float64)
    N, dim = x.shape
    if dim != state.dim:
        raise ValueError(f"expected {state.dim} columns, got {dim}")
    rho = max(0.0, 1.0 - N / state.num_samples_history)
    cov = rho * state.cov + (1.0 - rho) * (x.T @ x) / N
    cov = 0.5 * (cov + cov.T)
    new = NgState(dim, state.num_samples_history, state.alpha, cov, state.frames_seen + N)
    xx = float(np.sum(x * x))
    if xx == 0.0:
        return x.copy(), new
    smooth = state.alpha * np.trace(cov) / dim
    reg = cov + smooth * np.eye(dim)
    x_hat = np.linalg.solve(reg, x.T).T  # X T with T symmetric
    hh = float(np.sum(x_hat * x_hat))
    if hh == 0.0:
        return x.copy(), new
    return math.sqrt(xx / hh) * x_hat, new


def ng_affine_update(params, in_values, out_derivs, states, lr, has_bias=True):
    """Natural-gradient update of an affine layer.

    Parameters
    ----------
    params : dict with ``W`` (dim_out x dim_in) and, if ``has_bias``, ``b``
    in_values : N x dim_in layer inputs (the bias column of ones is appended
        here when ``has_bias``)
    out_derivs : N x dim_out per-sample derivatives of the loss
    states : ``(NgState_in, NgState_out)``

    Returns ``(new_params, (new_state_in, new_state_out))``; the step is
    ``-lr * B_hat^T A_hat / N`` on ``[W | b]``.
    """
    A = np.asarray(in_values, dtype=np.float64)
    if has_bias:
        A = np.hstack([A, np.ones((A.shape[0], 1))])
    B = np.asarray(out_derivs, dtype=np.float64)
    N = A.shape[0]
    st_in, st_out = states
    A_hat, st_in = ng_precondition(st_in, A)
    B_hat, st_out = ng_precondition(st_out, B)
    delta = -lr * (B_hat.T @ A_hat) / N
    W = params["W"]
    out = dict(params)
    if has_bias:
        out["W"] = (W + delta[:, :-1]).astype(W.dtype)
        out["b"] = (params["b"] + delta[:, -1]).astype(params["b"].dtype)
    else:
        out["W"] = (W + delta).astype(W.dtype)
    return out, (st_in, st_out)


def sgd_step(params, grads, lr):
    """``params - lr * grads`` for a dict (or a single array)."""
    if isinstance(params, dict):
        return {k: (v - lr * grads[k]).astype(v.dtype) if k in grads else v
                for k, v in params.items()}
    return params - lr * grads


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, lr, state: AdamState, prefix=""):
    """Adam update of a parameter dict; moments live in ``state`` under ``prefix``."""
    out = dict(params)
    t = state.step
    for k, g in grads.items():
        key = prefix + k
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(key, np.zeros_like(g))
        v = state.v.get(key, np.zeros_like(g))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p = params[k]
        out[k] = (p - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return out


@dataclass(frozen=True)
class LrSchedule:
    lr_initial: float
    lr_final: float
    total_iters: int

    def __post_init__(self):
        if not 0 < self.lr_final <= self.lr_initial:
            raise ValueError("need 0 < lr_final <= lr_initial")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")


def lr_at(s: LrSchedule, it: int) -> float:
    """Exponential decay from ``lr_initial`` (iter 0) to ``lr_final`` (iter total_iters)."""
    if not 0 <= it <= s.total_iters:
        raise ValueError(f"iteration {it} outside [0, {s.total_iters}]")
    if it == 0:
        return s.lr_initial
    if it == s.total_iters:
        return s.lr_final
    return s.lr_initial * (s.lr_final / s.lr_initial) ** (it / s.total_iters)


class Optimizer:
    """Applies one of ``sgd``, ``adam`` or ``ngsgd`` to every parameter of a
    :class:`~lfmmi.nnet.Network`.

    Under ``ngsgd`` the weight matrices of affine-like layers get the
    natural-gradient update (built from the row factors the backward pass
    keeps); everything else (biases of bias-free factors, batchnorm scale and
    offset) falls back to plain SGD.  The object owns all optimizer state and
    must not be shared between training jobs.
    """

    KINDS = ("sgd", "adam", "ngsgd")

    def __init__(self, kind="adam", alpha=4.0, num_samples_history=2000.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.alpha = alpha
        self.num_samples_history = num_samples_history
        self.adam = AdamState(beta1, beta2, eps)
        self.ng_states = {}
        self.num_steps = 0

    @property
    def needs_factors(self):
        return self.kind == "ngsgd"

    def _groups(self, net, bwd):
        for i, g in enumerate(bwd.grads):
            yield f"{i}.", net.params, i, g
        if net.xent_params is not None:
            yield "xent.", None, None, bwd.xent_grads

    def step(self, net, bwd, lr):
        self.num_steps += 1
        self.adam.step += 1
        for prefix, plist, i, grads in self._groups(net, bwd):
            if not grads:
                continue
            params = net.xent_params if plist is None else plist[i]
            if self.kind == "sgd":
                new = sgd_step(params, grads, lr)
            elif self.kind == "adam":
                new = adam_step(params, grads, lr, self.adam, prefix)
            else:
                new = self._ng(prefix, params, grads, bwd.factors, lr)
            if plist is None:
                net.xent_params = new
            else:
                plist[i] = new

    def _ng(self, prefix, params, grads, factors, lr):
        new = dict(params)
        done = set()
        for key in ("W", "M"):
            name = prefix + key
            if name not in factors:
                continue
            A, B, has_bias = factors[name]
            N = A.shape[0]
            if name not in self.ng_states:
                din = A.shape[1] + (1 if has_bias else 0)
                self.ng_states[name] = (NgState(din, self.num_samples_history, self.alpha),
                                        NgState(B.shape[1], self.num_samples_history, self.alpha))
            sub = {"W": params[key]}
            if has_bias:
                sub["b"] = params["b"]
            # per-sample derivatives: B^T A / N must equal the summed gradient
            upd, self.ng_states[name] = ng_affine_update(sub, A, np.asarray(B, np.float64) * N,
                                                         self.ng_states[name], lr, has_bias)
            new[key] = upd["W"]
            done.add(key)
            if has_bias:
                new["b"] = upd["b"]
                done.add("b")
        rest = {k: g for k, g in grads.items() if k not in done}
        if rest:
            new.update(sgd_step({k: params[k] for k in rest}, rest, lr))
        return new
