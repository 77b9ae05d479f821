"""Parallel LF-MMI training with per-iteration model averaging.

Each iteration runs ``num_jobs`` independent jobs, every job on its own copy
of the current model, its own optimizer state and a disjoint shard of egs.
When all jobs are done their parameters are averaged into the next model.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .chainloss import ChainOpts, EmptyCompositionError, chain_loss
from .egsio import shard_and_shuffle
from .ngsgd import LrSchedule, Optimizer, lr_at

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    num_epochs: int = 5
    num_jobs: int = 1
    num_shards: int = 0  # shards per epoch; 0 means num_jobs
    minibatch_chunks: int = 8
    lr_initial: float = 1e-3
    lr_final: float = 1e-5
    optimizer: str = "adam"
    leaky_hmm_coefficient: float = 0.1
    xent_regularize: float = 0.1
    l2_regularize: float = 5e-5
    subsample_factor: int = 3
    seed: int = 0
    scale_lr_by_jobs: bool = True
    constraint_interval: int = 4
    orthonormal_nu: float = 0.125
    ng_alpha: float = 4.0
    ng_num_samples_history: float = 2000.0

    def __post_init__(self):
        for name in ("num_epochs", "num_jobs", "minibatch_chunks", "subsample_factor",
                     "constraint_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_shards < 0:
            raise ValueError("num_shards must be >= 0")
        if self.optimizer not in Optimizer.KINDS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.chain_opts  # validates ranges

    @property
    def chain_opts(self):
        return ChainOpts(self.leaky_hmm_coefficient, self.xent_regularize, self.l2_regularize)

    @property
    def shards_per_epoch(self):
        return self.num_shards or self.num_jobs

    @property
    def total_iters(self):
        return math.ceil(self.num_epochs * self.shards_per_epoch / self.num_jobs)

    @property
    def schedule(self):
        return LrSchedule(self.lr_initial, self.lr_final, self.total_iters)

    def make_optimizer(self):
        return Optimizer(self.optimizer, alpha=self.ng_alpha,
                         num_samples_history=self.ng_num_samples_history)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TrainRecord:
    iter: int
    epoch: int
    lr: float
    train_objf: float
    valid_objf: float
    wall_time: float
    num_chunks: int = 0
    num_skipped: int = 0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    HEADER = "iter\tepoch\tlr\ttrain_objf\tvalid_objf\twall_time\tchunks\tskipped"

    def to_tsv(self):
        rows = [self.HEADER]
        for r in self.records:
            rows.append(f"{r.iter}\t{r.epoch}\t{r.lr:.10g}\t{r.train_objf:.10g}\t"
                        f"{r.valid_objf:.10g}\t{r.wall_time:.3f}\t{r.num_chunks}\t{r.num_skipped}")
        return "\n".join(rows) + "\n"

    def epoch_train_objf(self):
        """Chunk-weighted mean training objective per epoch."""
        acc = {}
        for r in self.records:
            s, n = acc.get(r.epoch, (0.0, 0))
            acc[r.epoch] = (s + r.train_objf * r.num_chunks, n + r.num_chunks)
        return [acc[e][0] / acc[e][1] for e in sorted(acc)]

    @property
    def objf_values(self):
        return [(r.train_objf, r.valid_objf) for r in self.records]


@dataclass
class JobResult:
    model: object
    objf: float
    num_chunks: int
    num_skipped: int


def _batch_forward(net, chunks, subsample_factor, training):
    x = np.stack([c.input for c in chunks])
    fwd = net.forward(x, training=training)
    extra = subsample_factor // net.stride
    if extra * net.stride != subsample_factor:
        raise ValueError(f"subsample factor {subsample_factor} not a multiple of network stride {net.stride}")
    y = fwd.output[:, ::extra]
    yx = None if fwd.xent_output is None else fwd.xent_output[:, ::extra]
    T = chunks[0].output_frames
    if y.shape[1] != T:
        raise ValueError(f"network produces {y.shape[1]} output frames, egs expect {T}")
    return fwd, y, yx, extra


def run_job(model, shard, config: TrainConfig, it, den, pi, optimizer=None, lr=None):
    """Train ``model`` in place on ``shard``; returns a :class:`JobResult`.

    Chunks whose supervision cannot be composed with the network output are
    skipped and counted.
    """
    if not shard:
        raise ValueError("empty shard")
    opts = config.chain_opts
    if optimizer is None:
        optimizer = config.make_optimizer()
    if lr is None:
        lr = lr_at(config.schedule, it)
    objfs = []
    skipped = 0
    mb = config.minibatch_chunks
    for b in range(0, len(shard), mb):
        chunks = shard[b:b + mb]
        fwd, y, yx, extra = _batch_forward(model, chunks, config.subsample_factor, True)
        if not np.isfinite(y).all():
            raise TrainingDivergedError(f"non-finite network output (iter {it})")
        grads, xgrads, used = [], [], []
        for n, c in enumerate(chunks):
            try:
                out = chain_loss(c.supervision, den, pi, y[n], opts,
                                 None if yx is None else yx[n])
            except EmptyCompositionError:
                skipped += 1
                continue
            total = out.objf_mmi + out.objf_l2 + opts.xent_regularize * out.objf_xent
            if not math.isfinite(total):
                raise TrainingDivergedError(f"non-finite objective on chunk {c.key} (iter {it})")
            objfs.append(out.objf_mmi)
            used.append(n)
            grads.append(out.grad)
            xgrads.append(out.xent_grad)
        if not used:
            continue
        # loss = -(mean objective over the minibatch)
        scale = -1.0 / len(used)
        dy = np.zeros(fwd.output.shape)
        dyx = None if yx is None else np.zeros(fwd.xent_output.shape)
        for n, g, xg in zip(used, grads, xgrads):
            dy[n, ::extra] = scale * g
            if dyx is not None:
                dyx[n, ::extra] = scale * xg
        bwd = model.backward(fwd, dy, dyx, keep_factors=optimizer.needs_factors)
        optimizer.step(model, bwd, lr)
        model.accumulate_bn_stats(fwd)
        if lr > 0 and optimizer.num_steps % config.constraint_interval == 0:
            model.apply_semi_orthogonal(config.orthonormal_nu)
    objf = float(np.mean(objfs)) if objfs else float("nan")
    return JobResult(model, objf, len(objfs), skipped)


def merge_models(models):
    """Parameter-wise (and batchnorm-statistics-wise) arithmetic mean."""
    models = list(models)
    if not models:
        raise ValueError("nothing to merge")
    first = models[0]
    for m in models[1:]:
        if not first.same_architecture(m):
            raise ValueError("cannot merge models with different architectures")
    if len(models) == 1:
        return first
    out = first.copy()
    K = len(models)

    def avg(get):
        return (sum(get(m).astype(np.float64) for m in models) / K).astype(first.dtype)

    for i, p in enumerate(out.params):
        for k in p:
            p[k] = avg(lambda m: m.params[i][k])
    for i, b in enumerate(out.buffers):
        for k in b:
            b[k] = avg(lambda m: m.buffers[i][k])
    if out.xent_params is not None:
        for k in out.xent_params:
            out.xent_params[k] = avg(lambda m: m.xent_params[k])
    return out


def compute_objf(net, egs, den, pi, opts: ChainOpts, subsample_factor=3, batch=32):
    """Mean per-chunk ``(objf_mmi, objf_xent, objf_l2)`` in evaluation mode."""
    egs = list(egs)
    tot = np.zeros(3)
    n = 0
    for b in range(0, len(egs), batch):
        chunks = egs[b:b + batch]
        _, y, yx, _ = _batch_forward(net, chunks, subsample_factor, False)
        for k, c in enumerate(chunks):
            try:
                out = chain_loss(c.supervision, den, pi, y[k], opts, None if yx is None else yx[k])
            except EmptyCompositionError:
                continue
            tot += (out.objf_mmi, out.objf_xent, out.objf_l2)
            n += 1
    if n == 0:
        return (float("nan"),) * 3
    return tuple(float(v) for v in tot / n)


def epoch_shards(egs, config: TrainConfig):
    """Flat list of shards over all epochs, in the order jobs consume them."""
    out = []
    for e in range(config.num_epochs):
        out.extend(shard_and_shuffle(egs, config.shards_per_epoch, config.seed + e))
    return out


def train(config: TrainConfig, egs, valid_egs, net, den, pi, callback=None):
    """Run ``config.total_iters`` iterations of parallel training.

    Returns ``(final_model, TrainLog)``.  ``net`` itself is not modified.
    """
    egs = list(egs)
    if not egs:
        raise ValueError("no training egs")
    valid_egs = list(valid_egs or [])
    shards = epoch_shards(egs, config)
    J = config.num_jobs
    optimizers = [config.make_optimizer() for _ in range(J)]
    log_ = TrainLog()
    sched = config.schedule
    model = net.copy()
    pool = ThreadPoolExecutor(J) if J > 1 else None
    try:
        for it in range(config.total_iters):
            t0 = time.perf_counter()
            lr = lr_at(sched, it)
            job_lr = lr * J if config.scale_lr_by_jobs else lr
            picks = [shards[(it * J + j) % len(shards)] for j in range(J)]
            args = [(model.copy(), picks[j], config, it, den, pi, optimizers[j], job_lr)
                    for j in range(J) if picks[j]]
            if pool is None:
                results = [run_job(*a) for a in args]
            else:
                results = list(pool.map(lambda a: run_job(*a), args))
            model = merge_models([r.model for r in results])
            n = sum(r.num_chunks for r in results)
            train_objf = sum(r.objf * r.num_chunks for r in results if r.num_chunks) / max(n, 1)
            valid_objf = (compute_objf(model, valid_egs, den, pi, config.chain_opts,
                                       config.subsample_factor)[0] if valid_egs else float("nan"))
            if not math.isfinite(train_objf) or (valid_egs and not math.isfinite(valid_objf)):
                raise TrainingDivergedError(
                    f"iteration {it}: train objf {train_objf}, valid objf {valid_objf}")
            rec = TrainRecord(it, it * J // config.shards_per_epoch, lr, train_objf, valid_objf,
                              time.perf_counter() - t0, n, sum(r.num_skipped for r in results))
            log_.records.append(rec)
            log.info("iter %d lr %.3g train %.5f valid %.5f", it, lr, train_objf, valid_objf)
            if callback is not None:
                callback(rec, model)
    finally:
        if pool is not None:
            pool.shutdown()
    return model, log_
