"""Synthetic corpus with a known answer.

Each utterance is a random phone sequence (no phone repeated back to back)
with random durations.  Frame ``t`` gets a ``num_phones``-dim feature vector
``mu * onehot(phone_t) + sigma * N(0, I)``, so a frame classifier with enough
signal-to-noise ratio is nearly error-free.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .egsio import load_scp, write_ark_scp


@dataclass
class ToyUtt:
    key: str
    feats: np.ndarray
    phones: list
    ali: np.ndarray


def gen_toy(num_phones=3, num_utts=50, seed=0, mu=4.0, sigma=1.0, min_frames=150,
            dur_range=(6, 20), prefix="utt"):
    if num_phones < 2:
        raise ValueError("need at least 2 phones")
    rng = np.random.default_rng(seed)
    lo, hi = dur_range
    utts = []
    for u in range(num_utts):
        phones, durs = [], []
        while sum(durs) < min_frames:
            choices = [p for p in range(num_phones) if not phones or p != phones[-1]]
            phones.append(int(rng.choice(choices)))
            durs.append(int(rng.integers(lo, hi + 1)))
        ali = np.repeat(np.array(phones, dtype=np.int64), durs)
        feats = sigma * rng.standard_normal((len(ali), num_phones))
        feats[np.arange(len(ali)), ali] += mu
        utts.append(ToyUtt(f"{prefix}{u:05d}", feats.astype(np.float32), phones, ali))
    return utts


def write_corpus(utts, out_dir):
    """Writes ``feats.ark``, ``feats.scp``, ``text`` and ``ali`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = write_ark_scp(((u.key, u.feats) for u in utts), out / "feats.ark")
    with open(out / "feats.scp", "w") as f:
        for e in entries:
            f.write(f"{e.key} feats.ark:{e.offset}\n")
    with open(out / "text", "w") as f:
        for u in utts:
            f.write(u.key + " " + " ".join(map(str, u.phones)) + "\n")
    with open(out / "ali", "w") as f:
        for u in utts:
            f.write(u.key + " " + " ".join(map(str, u.ali.tolist())) + "\n")


def read_int_table(path):
    out = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if parts:
                out[parts[0]] = [int(v) for v in parts[1:]]
    return out


def load_corpus(data_dir):
    """``(feats, transcripts, alignments)`` dicts from a corpus directory."""
    d = Path(data_dir)
    feats = load_scp(d / "feats.scp")
    text = read_int_table(d / "text")
    ali = read_int_table(d / "ali") if (d / "ali").exists() else None
    return feats, text, ali
