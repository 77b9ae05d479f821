"""Seeded random problem generators for property tests and ``lfmmi gradcheck``."""
from __future__ import annotations

import math

import numpy as np

from .graph import (GraphError, PhoneLm, Wfsa, _trim, build_denominator_graph,
                    build_numerator_graph, stationary_distribution)
from .nnet import LayerSpec, Network


def random_wfsa(rng, max_states=8, num_pdfs=3, max_out=3):
    """Random trimmed acceptor with start state 0."""
    while True:
        n = int(rng.integers(1, max_states + 1))
        arcs = []
        for s in range(n):
            for _ in range(int(rng.integers(1, max_out + 1))):
                arcs.append((s, int(rng.integers(n)), int(rng.integers(num_pdfs)),
                             math.log(rng.uniform(0.1, 1.0))))
        finals = {int(s): math.log(rng.uniform(0.1, 1.0))
                  for s in rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)}
        try:
            return _trim(Wfsa.from_arcs(n, 0, arcs, finals, num_pdfs))
        except GraphError:
            continue


def random_phone_lm(rng, num_phones, self_loop_prob=None):
    n = num_phones + 1
    probs = rng.dirichlet(np.ones(n), size=n)
    probs[num_phones, num_phones] = 0.0
    probs[num_phones] /= probs[num_phones].sum()
    if self_loop_prob is None:
        self_loop_prob = float(rng.uniform(0.2, 0.8))
    return PhoneLm.from_probs(probs, self_loop_prob)


def random_chain_case(rng, max_phones=4, max_frames=8, scale=1.0):
    """``(num, den, pi, o)`` with a flat-start numerator for a random transcript."""
    P = int(rng.integers(2, max_phones + 1))
    T = int(rng.integers(2, max_frames + 1))
    lm = random_phone_lm(rng, P)
    L = int(rng.integers(1, T + 1))
    trans = [int(p) for p in rng.integers(P, size=L)]
    num = build_numerator_graph(trans, lm, T)
    den = build_denominator_graph(lm)
    pi = stationary_distribution(den)
    o = scale * rng.standard_normal((T, P))
    return num, den, pi, o


def random_layer_stack(rng, feat_dim=3, max_layers=4, allow_subsample=True, hidden=4):
    layers = []
    d = feat_dim
    for _ in range(int(rng.integers(1, max_layers + 1))):
        kind = rng.choice(["tdnn", "tdnnf", "subsample"] if allow_subsample else ["tdnn", "tdnnf"])
        if kind == "subsample":
            layers.append(LayerSpec("subsample", d, d, stride=int(rng.integers(2, 4))))
            continue
        k = int(rng.integers(1, 4))
        offs = tuple(sorted(set([0] + [int(v) for v in rng.integers(-3, 4, size=k)])))
        if kind == "tdnn":
            layers.append(LayerSpec("tdnn", d, hidden, offs))
        else:
            layers.append(LayerSpec("tdnnf", d, hidden, offs, bottleneck=2))
        layers.append(LayerSpec("relu", hidden, hidden))
        layers.append(LayerSpec("batchnorm", hidden, hidden))
        d = hidden
    layers.append(LayerSpec("affine", d, 2))
    return layers


def grad_check_suite(seed=7, num_chain=20, verbose=None):
    """Worst gradient-check error over random chain cases (with and without
    leak) and small TDNN / TDNN-F stacks."""
    from .chainloss import ChainOpts, grad_check_chain
    from .nnet import build_tdnn, grad_check_net, quadratic_loss

    rng = np.random.default_rng(seed)
    worst_chain = 0.0
    for k in range(num_chain):
        num, den, pi, o = random_chain_case(rng)
        lam = (0.0, 0.1, 0.5)[k % 3]
        worst_chain = max(worst_chain, grad_check_chain(num, den, pi, o, ChainOpts(lam, 0.0, 1e-2)))
    worst_net = 0.0
    for bottleneck in (None, 3):
        net = build_tdnn(3, 2, hidden=(5, 5), bottleneck=bottleneck, seed=seed)
        x = rng.standard_normal((2, 9, 3))
        T_out = net.forward(x).output.shape[1]
        loss = quadratic_loss(rng.standard_normal((2, T_out, 2)))
        worst_net = max(worst_net, grad_check_net(net, x, loss, eps=1e-4))
    if verbose:
        verbose(f"chain max relative error {worst_chain:.3e}")
        verbose(f"net max relative error {worst_net:.3e}")
    return worst_chain, worst_net


def toy_network(feat_dim, num_pdfs, seed=0, hidden=32):
    return Network([
        LayerSpec("tdnn", feat_dim, hidden, (-1, 0, 1)),
        LayerSpec("relu", hidden, hidden),
        LayerSpec("batchnorm", hidden, hidden),
        LayerSpec("tdnn", hidden, hidden, (-1, 0, 1)),
        LayerSpec("relu", hidden, hidden),
        LayerSpec("batchnorm", hidden, hidden),
        LayerSpec("affine", hidden, num_pdfs),
    ], seed=seed)
