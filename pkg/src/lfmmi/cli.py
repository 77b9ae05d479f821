"""``lfmmi`` command line: the toy-to-decode recipe as subcommands.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .chainloss import EmptyCompositionError
from .decode import DecodeGraph, build_decode_graph, corpus_wer, emit_loglikes, read_text, viterbi
from .egsio import ArkFormatError, load_scp, make_egs, read_egs, shard_and_shuffle, write_egs
from .graph import GraphError, PhoneLm, build_denominator_graph, read_wfsa, stationary_distribution, write_wfsa
from .nnet import InsufficientContextError, Network, compute_context
from .toy import gen_toy, read_int_table, write_corpus
from .trainer import TrainingDivergedError, compute_objf, train

log = logging.getLogger("lfmmi")

DATA_ERRORS = (ArkFormatError, GraphError, EmptyCompositionError, InsufficientContextError,
               TrainingDivergedError, OSError, ValueError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_den(path):
    with open(path) as f:
        return read_wfsa(f)


def _load_egs_dir(path, pattern="egs.*.ark"):
    p = Path(path)
    if p.is_file():
        return list(read_egs(p))
    files = sorted(p.glob(pattern))
    if not files:
        raise OSError(f"no {pattern} files in {p}")
    return [c for f in files for c in read_egs(f)]


def cmd_gen_toy(a):
    train = gen_toy(a.phones, a.utts, seed=a.seed, mu=a.mu, sigma=a.sigma, min_frames=a.min_frames)
    write_corpus(train, Path(a.out) / "train")
    if a.test_utts:
        test = gen_toy(a.phones, a.test_utts, seed=a.seed + 10_000, mu=a.mu, sigma=a.sigma,
                       min_frames=a.min_frames, prefix="test")
        write_corpus(test, Path(a.out) / "test")
    log.info("wrote %d train / %d test utterances to %s", a.utts, a.test_utts, a.out)


def cmd_graph(a):
    text = read_int_table(a.text)
    lm = PhoneLm.estimate(text.values(), a.num_phones, a.self_loop_prob, a.add_k)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "phone_lm.txt").write_text(lm.to_text())
    with open(out / "den.wfsa", "w") as f:
        write_wfsa(build_denominator_graph(lm), f)
    dg = build_decode_graph(lm)
    with open(out / "decode.wfsa", "w") as f:
        write_wfsa(dg.fsa, f, dg.word_table)
    log.info("wrote phone LM, denominator and decoding graphs to %s", out)


def cmd_egs_create(a):
    lm = PhoneLm.from_text(Path(a.lm).read_text())
    left, right = a.left_context, a.right_context
    if left is None or right is None:
        cfg = cfgmod.load_config(a.config, preset=None if a.config else "toy")
        feat_dim = 1  # dims do not affect context
        ctx = compute_context(cfgmod.parse_model(cfg["model"], feat_dim, lm.num_phones))
        left = ctx[0] if left is None else left
        right = ctx[1] if right is None else right
    feats = load_scp(a.feats)
    text = read_int_table(a.text)
    ali = read_int_table(a.ali) if a.ali else None
    egs = list(make_egs(sorted(feats.items()), text, lm, a.chunk_width, left, right,
                        a.subsample_factor, alignments=ali, tolerance=a.tolerance))
    rng = np.random.default_rng(a.seed)
    utts = sorted({c.key.rsplit("-", 1)[0] for c in egs})
    valid_utts = set(rng.permutation(utts)[:a.num_valid_utts].tolist()) if a.num_valid else set()
    valid = [c for c in egs if c.key.rsplit("-", 1)[0] in valid_utts][:a.num_valid]
    train = [c for c in egs if c.key.rsplit("-", 1)[0] not in valid_utts]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, shard in enumerate(shard_and_shuffle(train, a.num_shards, a.seed), 1):
        write_egs(shard, out / f"egs.{k}.ark")
    write_egs(valid, out / "valid.ark")
    (out / "info.txt").write_text(
        f"left_context={left}\nright_context={right}\nchunk_width={a.chunk_width}\n"
        f"subsample_factor={a.subsample_factor}\nnum_shards={a.num_shards}\n"
        f"num_train={len(train)}\nnum_valid={len(valid)}\nfeat_dim={egs[0].input.shape[1]}\n")
    log.info("wrote %d train egs in %d shards, %d valid egs", len(train), a.num_shards, len(valid))


def _overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(a):
    over = _overrides(a.set)
    if a.seed is not None:
        over["seed"] = str(a.seed)
    if a.num_jobs is not None:
        over["num_jobs"] = str(a.num_jobs)
    cfg = cfgmod.load_config(a.config, over, preset=a.preset)
    tc = cfgmod.train_config(cfg)
    den = _read_den(a.den)
    pi = stationary_distribution(den)
    egs = _load_egs_dir(a.egs)
    valid_path = Path(a.egs) / "valid.ark"
    valid = list(read_egs(valid_path)) if valid_path.exists() else []
    feat_dim = egs[0].input.shape[1]
    net = cfgmod.build_model(cfg, feat_dim, den.num_pdfs, seed=tc.seed)
    need = net.context
    have = egs[0].input.shape[0] - egs[0].chunk_width
    if sum(need) != have:
        raise ValueError(f"egs carry {have} context frames, model needs {need}")
    model, tlog = train(tc, egs, valid, net, den, pi)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "final.mdl")
    (out / "train.log").write_text(tlog.to_tsv())
    last = tlog.records[-1]
    print(f"final train_objf={last.train_objf:.6f} valid_objf={last.valid_objf:.6f}")


def cmd_objf(a):
    den = _read_den(a.den)
    pi = stationary_distribution(den)
    model = Network.load(a.model)
    egs = _load_egs_dir(a.egs)
    cfg = cfgmod.load_config(a.config, _overrides(a.set))
    tc = cfgmod.train_config(cfg)
    mmi, xent, l2 = compute_objf(model, egs, den, pi, tc.chain_opts, tc.subsample_factor)
    print(f"mmi={mmi:.6f} xent={xent:.6f} l2={l2:.6f}")


def cmd_gradcheck(a):
    from .testing import grad_check_suite

    chain, net = grad_check_suite(a.seed, a.num_cases)
    worst = max(chain, net)
    print(f"chain max relative error {chain:.3e}")
    print(f"net max relative error {net:.3e}")
    print(f"max relative error {worst:.3e}")
    return 0 if worst < 1e-3 else 2


def cmd_decode(a):
    g = DecodeGraph.read(a.graph)
    model = Network.load(a.model)
    feats = load_scp(a.feats)
    ark = open(a.loglikes_out, "wb") if a.loglikes_out else None
    try:
        with open(a.out, "w") as f:
            for key in sorted(feats):
                o = emit_loglikes(model, feats[key], a.subsample_factor, key=key, sink=ark,
                                  pad_edges=not a.no_pad)
                words, _ = viterbi(g, o, a.acoustic_scale)
                f.write(" ".join([key] + words) + "\n")
    finally:
        if ark is not None:
            ark.close()
    log.info("decoded %d utterances into %s", len(feats), a.out)


def cmd_wer(a):
    refs = read_text(a.ref)
    hyps = read_text(a.hyp)
    if not refs:
        raise ValueError("empty reference file")
    S, D, I, v = corpus_wer(refs, hyps)
    print(f"WER {v:.2f}% [S={S} D={D} I={I}]")


def build_parser():
    p = _Parser(prog="lfmmi", description="Lattice-free MMI training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    s = sub.add_parser("gen-toy", help="generate a synthetic corpus")
    s.add_argument("--phones", type=int, default=3)
    s.add_argument("--utts", type=int, default=200)
    s.add_argument("--test-utts", type=int, default=0)
    s.add_argument("--mu", type=float, default=4.0)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--min-frames", type=int, default=150)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_toy)

    s = sub.add_parser("graph", help="estimate a phone LM and build den/decode graphs")
    s.add_argument("--text", required=True)
    s.add_argument("--num-phones", type=int, required=True)
    s.add_argument("--self-loop-prob", type=float, default=0.5)
    s.add_argument("--add-k", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("egs", help="training example tools")
    esub = s.add_subparsers(dest="egs_cmd", parser_class=_Parser)
    e = esub.add_parser("create", help="chunk features into egs shards")
    e.add_argument("--feats", required=True)
    e.add_argument("--text", required=True)
    e.add_argument("--ali")
    e.add_argument("--lm", required=True)
    e.add_argument("--config", help="model config (for default context)")
    e.add_argument("--chunk-width", type=int, default=140)
    e.add_argument("--subsample-factor", type=int, default=3)
    e.add_argument("--left-context", type=int)
    e.add_argument("--right-context", type=int)
    e.add_argument("--tolerance", type=int)
    e.add_argument("--num-shards", type=int, default=4)
    e.add_argument("--num-valid", type=int, default=32)
    e.add_argument("--num-valid-utts", type=int, default=16)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_egs_create)

    s = sub.add_parser("train", help="parallel LF-MMI training")
    s.add_argument("--config")
    s.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    s.add_argument("--egs", required=True)
    s.add_argument("--den", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--num-jobs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("objf", help="evaluate the chain objective on egs")
    s.add_argument("--model", required=True)
    s.add_argument("--egs", required=True)
    s.add_argument("--den", required=True)
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_objf)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--num-cases", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("decode", help="Viterbi-decode features with a model")
    s.add_argument("--graph", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--feats", required=True)
    s.add_argument("--acoustic-scale", type=float, default=1.0)
    s.add_argument("--subsample-factor", type=int, default=3)
    s.add_argument("--no-pad", action="store_true", help="do not replicate edge frames")
    s.add_argument("--loglikes-out", help="also write network outputs to this ark")
    s.add_argument("--out", default="hyp.txt")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("wer", help="score hypotheses against references")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.set_defaults(func=cmd_wer)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        a = parser.parse_args(argv)
        if a.cmd is None or (a.cmd == "egs" and a.egs_cmd is None):
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        rc = a.func(a)
    except UsageError as e:
        print(f"lfmmi: error: {e}", file=sys.stderr)
        return 1
    except DATA_ERRORS as e:
        print(f"lfmmi: {e}", file=sys.stderr)
        return 2
    return 0 if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
