"""Network output emission, exact Viterbi decoding and WER scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chainloss import EmptyCompositionError
from .egsio import _pad_edges, write_matrix_ark
from .graph import NEG_INF, PhoneLm, Wfsa, build_denominator_graph, read_wfsa
from .kernels import viterbi_kernel
from .nnet import InsufficientContextError


@dataclass(frozen=True)
class DecodeGraph:
    """A :class:`Wfsa` whose arcs carry output word ids (0 = no word)."""

    fsa: Wfsa
    word_table: list

    def __post_init__(self):
        if self.fsa.words is None:
            raise ValueError("decode graph needs word labels on arcs")
        if len(self.fsa.words) and (self.fsa.words.min() < 0 or
                                    self.fsa.words.max() >= len(self.word_table)):
            raise ValueError("word id outside the word table")

    @classmethod
    def read(cls, path):
        with open(path) as f:
            g, table = read_wfsa(f, with_words=True)
        if table is None:
            table = ["<eps>"] + [str(i) for i in range(1, int(g.words.max()) + 1)]
        return cls(g, table)


def build_decode_graph(lm: PhoneLm, phone_names=None) -> DecodeGraph:
    """Phone-loop decoding graph: the denominator topology with a word label
    (the phone) on every arc that enters a phone, and none on self-loops."""
    den = build_denominator_graph(lm)
    names = phone_names or [str(p) for p in range(lm.num_phones)]
    words = np.where(den.src == den.dst, 0, den.pdf + 1)
    fsa = Wfsa(den.num_states, den.start, den.src, den.dst, den.pdf, den.logw,
               den.final_logw, den.num_pdfs, words=words)
    return DecodeGraph(fsa, ["<eps>"] + list(names))


def emit_loglikes(model, feats, subsample_factor=3, key=None, sink=None, pad_edges=False):
    """Run the model in evaluation mode and keep every ``subsample_factor``-th output row.

    With ``pad_edges`` the input is extended by replicating edge frames so
    that the output covers the whole utterance.  If ``sink`` is given, the
    matrix is appended to it as an ark record under ``key``.
    """
    feats = np.asarray(feats, dtype=np.float32)
    left, right = model.context
    if pad_edges:
        feats = _pad_edges(feats, left, right)
    elif feats.shape[0] < left + right + 1:
        raise InsufficientContextError(
            f"insufficient context: {feats.shape[0]} frames, need at least {left + right + 1}")
    extra = subsample_factor // model.stride
    if extra * model.stride != subsample_factor:
        raise ValueError("subsample factor must be a multiple of the network stride")
    out = model.forward(feats, training=False).output[0][::extra]
    out = np.ascontiguousarray(out, dtype=np.float32)
    if sink is not None:
        write_matrix_ark([(key, out)], sink)
    return out


def best_path(fsa: Wfsa, o, acoustic_scale=1.0):
    """``(score, arc index per frame)`` of the best length-T path through ``fsa``."""
    o = np.asarray(o, dtype=np.float64)
    if o.ndim != 2 or o.shape[1] != fsa.num_pdfs:
        raise ValueError(f"loglikes must have {fsa.num_pdfs} columns")
    order = np.lexsort((np.arange(fsa.num_arcs), fsa.src))
    score, path = viterbi_kernel(fsa.src, fsa.dst, fsa.pdf, fsa.logw, fsa.final_logw,
                                 fsa.start, fsa.num_states,
                                 np.ascontiguousarray(acoustic_scale * o), order)
    if not score > NEG_INF:
        raise EmptyCompositionError()
    return float(score), path


def viterbi(g: DecodeGraph, o, acoustic_scale=1.0):
    """Best path through ``g`` for the loglikes ``o``.

    Returns ``(words, score)``; ``words`` lists the non-zero word labels of
    the path's arcs as strings.  Ties go to the arc with the smallest
    ``(source state, arc index)``, and among final states to the smallest id.
    """
    score, path = best_path(g.fsa, o, acoustic_scale)
    words = [g.word_table[int(g.fsa.words[e])] for e in path if g.fsa.words[e] != 0]
    return words, score


def wer(ref, hyp):
    """Unit-cost Levenshtein alignment; returns ``(S, D, I, WER%)``.

    Among alignments with the minimum number of errors, substitutions are
    preferred over a deletion+insertion pair.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("empty reference")
    R, H = len(ref), len(hyp)
    # cost, then (S, D, I) for tie-breaking
    d = [[None] * (H + 1) for _ in range(R + 1)]
    d[0][0] = (0, 0, 0, 0)
    for i in range(1, R + 1):
        d[i][0] = (i, 0, i, 0)
    for j in range(1, H + 1):
        d[0][j] = (j, 0, 0, j)
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            c, s, dl, ins = d[i - 1][j - 1]
            sub = (c, s, dl, ins) if ref[i - 1] == hyp[j - 1] else (c + 1, s + 1, dl, ins)
            c, s, dl, ins = d[i - 1][j]
            dele = (c + 1, s, dl + 1, ins)
            c, s, dl, ins = d[i][j - 1]
            insr = (c + 1, s, dl, ins + 1)
            d[i][j] = min(sub, dele, insr, key=lambda t: (t[0], -t[1]))
    c, s, dl, ins = d[R][H]
    return s, dl, ins, 100.0 * c / R


def corpus_wer(refs: dict, hyps: dict):
    """Pooled WER over utterances present in ``refs`` (missing hyps count as empty)."""
    S = D = I = N = 0
    for key, r in refs.items():
        s, dl, ins, _ = wer(r, hyps.get(key, []))
        S, D, I, N = S + s, D + dl, I + ins, N + len(r)
    return S, D, I, 100.0 * (S + D + I) / max(N, 1)


def read_text(path):
    """``<key> <tokens...>`` lines into a dict of token lists."""
    out = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if parts:
                out[parts[0]] = parts[1:]
    return out
