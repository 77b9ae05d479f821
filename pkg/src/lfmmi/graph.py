"""Weighted finite-state acceptors over pdf-ids.

Every arc consumes exactly one frame and carries a natural-log weight.  The
denominator graph is a phone-loop HMM (one emitting state per phone, pdf-id =
phone id) closed under a bigram phone LM; numerator graphs are linear chains
over a transcript that reuse the denominator's arc weights.
"""
from __future__ import annotations

import io
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

NEG_INF = -math.inf


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Wfsa:
    """Epsilon-free weighted acceptor.

    Arcs are stored column-wise (``src``, ``dst``, ``pdf``, ``logw``).  Arrays
    are made read-only at construction so graphs can be shared freely.
    """

    num_states: int
    start: int
    src: np.ndarray
    dst: np.ndarray
    pdf: np.ndarray
    logw: np.ndarray
    final_logw: np.ndarray
    num_pdfs: int
    words: np.ndarray | None = None
    _prob: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        def ro(a, dtype):
            a = np.array(a, dtype=dtype).reshape(-1)
            a.setflags(write=False)
            return a

        object.__setattr__(self, "src", ro(self.src, np.int64))
        object.__setattr__(self, "dst", ro(self.dst, np.int64))
        object.__setattr__(self, "pdf", ro(self.pdf, np.int64))
        object.__setattr__(self, "logw", ro(self.logw, np.float64))
        object.__setattr__(self, "final_logw", ro(self.final_logw, np.float64))
        if self.words is not None:
            object.__setattr__(self, "words", ro(self.words, np.int64))
        n = len(self.src)
        if not (len(self.dst) == len(self.pdf) == len(self.logw) == n):
            raise GraphError("arc arrays have different lengths")
        if len(self.final_logw) != self.num_states:
            raise GraphError("final_logw length differs from num_states")

    @classmethod
    def from_arcs(cls, num_states, start, arcs, finals, num_pdfs, words=None):
        """Build from ``arcs = [(src, dst, pdf, logw), ...]`` and ``finals = {state: logw}``."""
        arcs = list(arcs)
        cols = list(zip(*arcs)) if arcs else ([], [], [], [])
        final = np.full(num_states, NEG_INF)
        for s, lw in dict(finals).items():
            final[s] = lw
        return cls(num_states, start, cols[0], cols[1], cols[2], cols[3], final, num_pdfs,
                   words=words)

    @property
    def num_arcs(self):
        return len(self.src)

    def arcs(self):
        for e in range(self.num_arcs):
            yield int(self.src[e]), int(self.dst[e]), int(self.pdf[e]), float(self.logw[e])

    def prob_arrays(self):
        """Probability-domain arc weights and final weights (cached)."""
        if self._prob is None:
            object.__setattr__(self, "_prob", (np.exp(self.logw), np.exp(self.final_logw)))
        return self._prob


@dataclass(frozen=True)
class PhoneLm:
    """Bigram phone LM.

    ``bigram_logp`` is ``(num_phones+1) x (num_phones+1)``; index ``num_phones``
    is the sentence boundary (row: begin, column: end).
    """

    num_phones: int
    bigram_logp: np.ndarray
    self_loop_prob: float = 0.5

    def __post_init__(self):
        b = np.array(self.bigram_logp, dtype=np.float64)
        n = self.num_phones + 1
        if b.shape != (n, n):
            raise GraphError(f"bigram_logp must be {n}x{n}, got {b.shape}")
        if not 0.0 < self.self_loop_prob < 1.0:
            raise GraphError("self_loop_prob must lie in (0, 1)")
        b.setflags(write=False)
        object.__setattr__(self, "bigram_logp", b)

    @classmethod
    def from_probs(cls, probs, self_loop_prob=0.5):
        probs = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(probs.shape[0] - 1, np.log(probs), self_loop_prob)

    @classmethod
    def uniform(cls, num_phones, self_loop_prob=0.5):
        """Phone loop where, after a phone, every other phone and the end
        symbol are equally likely (no phone follows itself)."""
        P = num_phones
        probs = np.full((P + 1, P + 1), 1.0 / P)
        np.fill_diagonal(probs, 0.0)
        probs[P, :P] = 1.0 / P
        return cls.from_probs(probs, self_loop_prob)

    @classmethod
    def estimate(cls, transcripts, num_phones, self_loop_prob=0.5, add_k=0.1):
        """Add-k smoothed bigram estimate from phone sequences.

        Begin->end (empty utterance) is never smoothed in.
        """
        n = num_phones + 1
        counts = np.full((n, n), add_k)
        counts[num_phones, num_phones] = 0.0
        for seq in transcripts:
            prev = num_phones
            for p in seq:
                counts[prev, p] += 1
                prev = p
            counts[prev, num_phones] += 1
        return cls.from_probs(counts / counts.sum(axis=1, keepdims=True), self_loop_prob)

    def check(self):
        probs = np.exp(self.bigram_logp)
        sums = probs.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-8)
        if bad.size:
            raise GraphError(f"bigram rows {bad.tolist()} do not sum to 1")

    def to_text(self):
        lines = [f"phonelm {self.num_phones} {self.self_loop_prob!r}"]
        for row in self.bigram_logp:
            lines.append(" ".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln.split() for ln in text.strip().splitlines()]
        if not lines or lines[0][0] != "phonelm":
            raise GraphError("not a phone LM file")
        num_phones, slp = int(lines[0][1]), float(lines[0][2])
        mat = np.array([[float(v) for v in ln] for ln in lines[1:]])
        return cls(num_phones, mat, slp)


@dataclass(frozen=True)
class LeakyInit:
    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        if (pi < 0).any() or abs(pi.sum() - 1.0) > 1e-8:
            raise GraphError("leak distribution must be non-negative and sum to 1")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        return "ok" if self.ok else "\n".join(self.violations)


def _reachable(num_states, starts, edges_from):
    seen = np.zeros(num_states, dtype=bool)
    q = deque(s for s in starts if 0 <= s < num_states)
    for s in q:
        seen[s] = True
    while q:
        s = q.popleft()
        for d in edges_from[s]:
            if not seen[d]:
                seen[d] = True
                q.append(d)
    return seen


def validate_wfsa(g: Wfsa) -> ValidationReport:
    """Check every structural invariant of ``g``; never raises."""
    rep = ValidationReport()
    n = g.num_states
    if not 0 <= g.start < n:
        rep.violations.append(f"start state {g.start} out of range")
    finals = np.flatnonzero(g.final_logw > NEG_INF)
    if finals.size == 0:
        rep.violations.append("no final state")
    if np.isnan(g.final_logw).any():
        rep.violations.append("NaN final weight")
    fwd = [[] for _ in range(n)]
    bwd = [[] for _ in range(n)]
    for e, (s, d, p, lw) in enumerate(g.arcs()):
        if not (0 <= s < n and 0 <= d < n):
            rep.violations.append(f"arc {e}: arc endpoint out of range ({s}->{d})")
            continue
        if not 0 <= p < g.num_pdfs:
            rep.violations.append(f"arc {e}: pdf {p} out of range")
        if math.isnan(lw) or lw == math.inf:
            rep.violations.append(f"arc {e}: invalid weight {lw}")
        fwd[s].append(d)
        bwd[d].append(s)
    if g.words is not None and len(g.words) != g.num_arcs:
        rep.violations.append("word label count differs from arc count")
    if not rep.ok:
        return rep
    reach = _reachable(n, [g.start], fwd)
    coreach = _reachable(n, finals.tolist(), bwd)
    for s in range(n):
        if not reach[s]:
            rep.violations.append(f"state {s}: state not reachable")
        if not coreach[s]:
            rep.violations.append(f"state {s}: state not co-reachable")
    return rep


def _check_valid(g):
    rep = validate_wfsa(g)
    if not rep.ok:
        raise GraphError(str(rep))
    return g


def build_denominator_graph(lm: PhoneLm) -> Wfsa:
    """Phone-loop HMM closed under the bigram LM.

    State 0 is the initial state: it carries the begin-symbol bigram mass on
    its outgoing arcs (so it is never re-entered).  Phone ``p`` lives in state
    ``p + 1`` and every arc into it emits pdf ``p``.
    """
    P = lm.num_phones
    B = lm.bigram_logp
    ls = math.log(lm.self_loop_prob)
    lx = math.log1p(-lm.self_loop_prob)
    arcs = []
    finals = {}
    for q in range(P):
        if B[P, q] > NEG_INF:
            arcs.append((0, q + 1, q, B[P, q]))
    if B[P, P] > NEG_INF:
        finals[0] = B[P, P]
    for p in range(P):
        if not (np.isfinite(B[p]).any()):
            raise GraphError(f"dead phone state: phone {p} has no successors")
        arcs.append((p + 1, p + 1, p, ls))
        for q in range(P):
            if B[p, q] > NEG_INF:
                arcs.append((p + 1, q + 1, q, lx + B[p, q]))
        if B[p, P] > NEG_INF:
            finals[p + 1] = lx + B[p, P]
    g = Wfsa.from_arcs(P + 1, 0, arcs, finals, P)
    return _trim(g)


def _trim(g: Wfsa) -> Wfsa:
    """Drop states that are unreachable or cannot reach a final state."""
    n = g.num_states
    fwd = [[] for _ in range(n)]
    bwd = [[] for _ in range(n)]
    for s, d, _, _ in g.arcs():
        fwd[s].append(d)
        bwd[d].append(s)
    keep = _reachable(n, [g.start], fwd) & _reachable(
        n, np.flatnonzero(g.final_logw > NEG_INF).tolist(), bwd)
    if keep.all():
        return g
    if not keep[g.start]:
        raise GraphError("graph accepts nothing")
    remap = np.cumsum(keep) - 1
    amask = keep[g.src] & keep[g.dst]
    words = None if g.words is None else g.words[amask]
    return Wfsa(int(keep.sum()), int(remap[g.start]), remap[g.src[amask]], remap[g.dst[amask]],
                g.pdf[amask], g.logw[amask], g.final_logw[keep], g.num_pdfs, words=words)


def build_numerator_graph(transcript, lm: PhoneLm, num_frames: int, constraint=None) -> Wfsa:
    """Linear chain over ``transcript`` with the denominator's arc weights.

    Parameters
    ----------
    transcript : sequence of phone ids
    lm : the phone LM the denominator graph was built from
    num_frames : number of frames the supervision must span
    constraint : optional per-phone ``(min_dur, max_dur)`` pairs; ``max_dur``
        may be None for no upper bound.  Without it (flat-start mode) each phone
        is a single state with a self-loop.
    """
    transcript = [int(p) for p in transcript]
    if not transcript:
        raise GraphError("empty transcript")
    P = lm.num_phones
    if any(not 0 <= p < P for p in transcript):
        raise GraphError("transcript phone out of range")
    n = len(transcript)
    if constraint is None:
        constraint = [(1, None)] * n
    constraint = [(max(1, int(lo)), None if hi is None else int(hi)) for lo, hi in constraint]
    if len(constraint) != n:
        raise GraphError("constraint length differs from transcript length")
    if any(hi is not None and hi < lo for lo, hi in constraint):
        raise GraphError("infeasible supervision: max_dur < min_dur")
    min_total = sum(lo for lo, _ in constraint)
    unbounded = any(hi is None for _, hi in constraint)
    max_total = math.inf if unbounded else sum(hi for _, hi in constraint)
    if not min_total <= num_frames <= max_total:
        raise GraphError(
            f"infeasible supervision: {n} phones need {min_total}..{max_total} frames, got {num_frames}")

    B = lm.bigram_logp
    ls = math.log(lm.self_loop_prob)
    lx = math.log1p(-lm.self_loop_prob)
    arcs = []
    finals = {}
    prev_exits = [(0, None)]  # (state, previous phone or None for begin)
    next_state = 1
    for i, (p, (lo, hi)) in enumerate(zip(transcript, constraint)):
        length = lo if hi is None else hi
        first = next_state
        states = list(range(first, first + length))
        next_state += length
        for s, pp in prev_exits:
            lw = B[P, p] if pp is None else lx + B[pp, p]
            if lw > NEG_INF:
                arcs.append((s, first, p, lw))
        for k in range(length - 1):
            arcs.append((states[k], states[k + 1], p, ls))
        if hi is None:
            arcs.append((states[-1], states[-1], p, ls))
        prev_exits = [(s, p) for s in states[lo - 1:]]
        if i == n - 1:
            for s, pp in prev_exits:
                if B[pp, P] > NEG_INF:
                    finals[s] = lx + B[pp, P]
    if not finals:
        raise GraphError("infeasible supervision: LM gives the transcript zero probability")
    g = Wfsa.from_arcs(next_state, 0, arcs, finals, P)
    return _check_valid(_trim(g))


def transition_matrix(g: Wfsa) -> np.ndarray:
    """Row-normalised state-to-state probability matrix (final mass excluded)."""
    w, _ = g.prob_arrays()
    M = np.zeros((g.num_states, g.num_states))
    np.add.at(M, (g.src, g.dst), w)
    rows = M.sum(axis=1, keepdims=True)
    np.divide(M, rows, out=M, where=rows > 0)
    return M


def stationary_distribution(g: Wfsa, num_iters: int = 100) -> LeakyInit:
    """Leak distribution: ``num_iters`` power-iteration steps from uniform.

    States without outgoing arcs absorb nothing; the vector is renormalised
    after each step (and falls back to uniform if all mass leaves the graph).
    """
    n = g.num_states
    M = transition_matrix(g)
    pi = np.full(n, 1.0 / n)
    for _ in range(num_iters):
        nxt = pi @ M
        s = nxt.sum()
        pi = nxt / s if s > 0 else np.full(n, 1.0 / n)
    return LeakyInit(pi / pi.sum())


def write_wfsa(g: Wfsa, sink=None, word_table=None) -> str:
    """Text form; returns the text and also writes it to ``sink`` if given.

    Decoding graphs add a word-id column to arc lines and ``w <id> <word>``
    lines for the word table.
    """
    out = io.StringIO()
    out.write(f"wfsa {g.num_states} {g.start} {g.num_pdfs}\n")
    for e, (s, d, p, lw) in enumerate(g.arcs()):
        if g.words is not None:
            out.write(f"a {s} {d} {p} {lw:.17g} {int(g.words[e])}\n")
        else:
            out.write(f"a {s} {d} {p} {lw:.17g}\n")
    for s in np.flatnonzero(g.final_logw > NEG_INF):
        out.write(f"f {s} {g.final_logw[s]:.17g}\n")
    if word_table is not None:
        for i, wd in enumerate(word_table):
            out.write(f"w {i} {wd}\n")
    out.write(".\n")
    text = out.getvalue()
    if sink is not None:
        sink.write(text)
    return text


def read_wfsa(lines, with_words=False):
    """Parse the text form from an iterable of lines.

    Stops at the terminating ``.`` line.  Returns the graph, or
    ``(graph, word_table)`` when ``with_words`` is set.
    """
    it = iter(lines)
    header = None
    arcs, words, finals, table = [], [], {}, {}
    for k, raw in enumerate(it, 1):
        line = raw.decode() if isinstance(raw, bytes) else raw
        f = line.split()
        if not f:
            continue
        if header is None:
            if f[0] != "wfsa" or len(f) != 4:
                raise GraphError(f"line {k}: expected 'wfsa <num_states> <start> <num_pdfs>'")
            header = int(f[1]), int(f[2]), int(f[3])
        elif f[0] == "a" and len(f) in (5, 6):
            arcs.append((int(f[1]), int(f[2]), int(f[3]), float(f[4])))
            if len(f) == 6:
                words.append(int(f[5]))
        elif f[0] == "f" and len(f) == 3:
            finals[int(f[1])] = float(f[2])
        elif f[0] == "w" and len(f) == 3:
            table[int(f[1])] = f[2]
        elif f[0] == ".":
            break
        else:
            raise GraphError(f"line {k}: cannot parse {line.strip()!r}")
    else:
        raise GraphError("unterminated wfsa (missing '.')")
    if words and len(words) != len(arcs):
        raise GraphError("word labels must be given on all arcs or none")
    g = Wfsa.from_arcs(header[0], header[1], arcs, finals, header[2], words=words or None)
    if with_words:
        tab = [table[i] for i in range(len(table))] if table else None
        return g, tab
    return g
