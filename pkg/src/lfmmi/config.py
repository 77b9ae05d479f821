"""Plain-text ``key = value`` recipe configuration.

Recognised keys are the :class:`~lfmmi.trainer.TrainConfig` fields, ``model``
(a layer string, see :func:`parse_model`), ``xent_head``, ``self_loop_prob``,
``chunk_width``, ``num_valid``, ``tolerance`` and the data paths ``feats``,
``text``, ``ali``, ``egs_dir``, ``out_dir``.  Lines starting with ``#`` are
comments.

Defaults chosen here: bigram phone LM with self-loop 0.5,
leaky-HMM 0.1, xent weight 0.1, L2 5e-5, NG-SGD alpha 4 / history 2000.
"""
from __future__ import annotations

import dataclasses
import re

from .nnet import LayerSpec, Network
from .trainer import TrainConfig

# 7 TDNN layers of 625 units, 140-frame chunks, SGD at 1e-4, 4 epochs
TDNN_PRESET = {
    "model": "tdnn(625;-1,0,1) relu batchnorm tdnn(625;-1,0,1) relu batchnorm "
             "tdnn(625;-1,0,1) relu batchnorm tdnn(625;0) relu batchnorm "
             "tdnn(625;-3,0,3) relu batchnorm tdnn(625;-3,0,3) relu batchnorm "
             "tdnn(625;-3,0,3) relu batchnorm affine",
    "optimizer": "sgd", "lr_initial": "1e-4", "lr_final": "1e-4", "num_epochs": "4",
    "chunk_width": "140",
}

# 12 TDNN-F layers (1024 hidden, 128 bottleneck), Adam 1e-3 -> 1e-5 over 5 epochs
TDNNF_PRESET = {
    "model": "tdnn(1024;-1,0,1) relu batchnorm "
             + "tdnnf(1024;128;-1,0,1) relu batchnorm " * 4
             + "tdnnf(1024;128;-3,0,3) relu batchnorm " * 7
             + "affine",
    "optimizer": "adam", "lr_initial": "1e-3", "lr_final": "1e-5", "num_epochs": "5",
    "chunk_width": "140",
}

# desk-scale model used by the toy recipe
TOY_PRESET = {
    "model": "tdnn(32;-1,0,1) relu batchnorm tdnn(32;-1,0,1) relu batchnorm affine",
    "optimizer": "adam", "lr_initial": "1e-3", "lr_final": "1e-5", "num_epochs": "5",
    "chunk_width": "140", "num_jobs": "1", "num_shards": "4", "minibatch_chunks": "8",
}

PRESETS = {"tdnn": TDNN_PRESET, "tdnnf": TDNNF_PRESET, "toy": TOY_PRESET}

_LAYER = re.compile(r"^(\w+)(?:\(([^)]*)\))?$")


def parse_config(text):
    out = {}
    for k, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {k}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def load_config(path, overrides=None, preset=None):
    cfg = dict(PRESETS[preset]) if preset else {}
    if path:
        with open(path) as f:
            cfg.update(parse_config(f.read()))
    cfg.update(overrides or {})
    return cfg


def _coerce(ftype, val):
    if ftype in (bool, "bool"):
        return str(val).lower() in ("1", "true", "yes")
    if ftype in (int, "int"):
        return int(val)
    if ftype in (float, "float"):
        return float(val)
    return str(val)


def train_config(cfg) -> TrainConfig:
    kw = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in cfg:
            kw[f.name] = _coerce(f.type, cfg[f.name])
    return TrainConfig(**kw)


def parse_model(spec, feat_dim, num_pdfs):
    """Layer string to :class:`LayerSpec` list.

    Tokens: ``tdnn(dim;offsets)``, ``tdnnf(dim;bottleneck;offsets)``,
    ``affine(dim)`` or bare ``affine`` (output layer of ``num_pdfs``),
    ``relu``, ``batchnorm``, ``subsample(stride)``.  Offsets are comma
    separated.
    """
    layers = []
    d = feat_dim
    for tok in spec.split():
        m = _LAYER.match(tok)
        if not m:
            raise ValueError(f"bad layer token {tok!r}")
        kind, args = m.group(1), [a for a in (m.group(2) or "").split(";") if a]
        if kind == "tdnn":
            dim, offs = int(args[0]), tuple(int(v) for v in args[1].split(","))
            layers.append(LayerSpec("tdnn", d, dim, offs))
        elif kind == "tdnnf":
            dim, bn = int(args[0]), int(args[1])
            offs = tuple(int(v) for v in args[2].split(","))
            layers.append(LayerSpec("tdnnf", d, dim, offs, bottleneck=bn))
        elif kind == "affine":
            dim = int(args[0]) if args else num_pdfs
            layers.append(LayerSpec("affine", d, dim))
        elif kind in ("relu", "batchnorm"):
            layers.append(LayerSpec(kind, d, d))
        elif kind == "subsample":
            layers.append(LayerSpec("subsample", d, d, stride=int(args[0])))
        else:
            raise ValueError(f"unknown layer {kind!r}")
        d = layers[-1].dim_out
    if not layers or layers[-1].dim_out != num_pdfs:
        raise ValueError(f"model must end in a {num_pdfs}-dim output layer")
    return layers


def build_model(cfg, feat_dim, num_pdfs, seed=0) -> Network:
    layers = parse_model(cfg["model"], feat_dim, num_pdfs)
    xent = _coerce(bool, cfg.get("xent_head", "false"))
    return Network(layers, seed=seed, xent_dim=num_pdfs if xent else None)
