import math

import numpy as np
import pytest

from lfmmi.chainloss import ChainOpts, chain_loss
from lfmmi.egsio import make_egs
from lfmmi.graph import PhoneLm, build_denominator_graph, stationary_distribution
from lfmmi.ngsgd import Optimizer, lr_at
from lfmmi.nnet import LayerSpec, Network, build_tdnn
from lfmmi.testing import toy_network
from lfmmi.toy import gen_toy
from lfmmi.trainer import (TrainConfig, TrainingDivergedError, compute_objf, epoch_shards,
                           merge_models, run_job, train)


@pytest.fixture(scope="module")
def toy():
    utts = gen_toy(3, 12, seed=3, min_frames=60)
    lm = PhoneLm.estimate([u.phones for u in utts], 3)
    den = build_denominator_graph(lm)
    pi = stationary_distribution(den)
    egs = list(make_egs([(u.key, u.feats) for u in utts], {u.key: u.phones for u in utts}, lm,
                        30, 2, 2, 3, {u.key: u.ali for u in utts}))
    return egs, den, pi


def params_equal(a, b):
    return all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.param_items(), b.param_items()))


def small_net(seed=0, xent=False):
    return build_tdnn(3, 3, hidden=(8, 8), bottleneck=4, xent=xent, seed=seed)


class TestRunJob:
    def test_lr_zero(self, toy):
        egs, den, pi = toy
        net = small_net(xent=True)
        cfg = TrainConfig(minibatch_chunks=2, constraint_interval=1)
        res = run_job(net.copy(), egs[:6], cfg, 0, den, pi, lr=0.0)
        assert params_equal(res.model, net)

    def test_scripted_step(self, toy):
        egs, den, pi = toy
        net = small_net(1)
        cfg = TrainConfig(optimizer="sgd", minibatch_chunks=1)
        res = run_job(net.copy(), egs[:1], cfg, 0, den, pi, lr=0.05)

        c = egs[0]
        ref = net.copy()
        fwd = ref.forward(c.input[None])
        out = chain_loss(c.supervision, den, pi, fwd.output[0, ::3], cfg.chain_opts)
        dy = np.zeros(fwd.output.shape)
        dy[0, ::3] = -out.grad
        bwd = ref.backward(fwd, dy)
        for p, g in zip(ref.params, bwd.grads):
            for k in g:
                p[k] = (p[k] - 0.05 * g[k]).astype(p[k].dtype)
        ref.accumulate_bn_stats(fwd)
        assert params_equal(res.model, ref)
        assert res.objf == out.objf_mmi and res.num_chunks == 1

    def test_objf_is_mean(self, toy):
        egs, den, pi = toy
        net = small_net(2)
        cfg = TrainConfig(minibatch_chunks=4)
        res = run_job(net.copy(), egs[:4], cfg, 0, den, pi, lr=0.0)
        fwd = net.forward(np.stack([c.input for c in egs[:4]]))
        expect = np.mean([chain_loss(c.supervision, den, pi, fwd.output[n, ::3], cfg.chain_opts).objf_mmi
                          for n, c in enumerate(egs[:4])])
        assert res.objf == pytest.approx(expect, abs=1e-12)

    def test_skips_empty(self, toy):
        egs, den, pi = toy
        from dataclasses import replace
        from lfmmi.graph import Wfsa
        dead = Wfsa.from_arcs(2, 0, [(0, 1, 0, 0.0)], {1: 0.0}, 3)
        bad = replace(egs[0], supervision=dead)
        res = run_job(small_net(), [bad, egs[1]], TrainConfig(), 0, den, pi)
        assert (res.num_chunks, res.num_skipped) == (1, 1)

    def test_empty_shard(self, toy):
        with pytest.raises(ValueError):
            run_job(small_net(), [], TrainConfig(), 0, *toy[1:])


class TestMerge:
    def test_identity(self):
        net = small_net()
        assert merge_models([net]) is net
        assert params_equal(merge_models([net, net.copy(), net.copy()]), net)

    def test_mean(self):
        layers = [LayerSpec("affine", 2, 2)]
        a = Network(layers, params=[{"W": np.zeros((2, 2), np.float32), "b": np.zeros(2, np.float32)}])
        b = Network(layers, params=[{"W": np.full((2, 2), 2, np.float32), "b": np.ones(2, np.float32)}])
        m = merge_models([a, b])
        np.testing.assert_array_equal(m.params[0]["W"], 1.0)
        np.testing.assert_array_equal(m.params[0]["b"], 0.5)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="architecture"):
            merge_models([small_net(), build_tdnn(3, 3, hidden=(8,))])


def sequential_oracle(cfg, egs, net, den, pi, iters):
    """Plain loop over all shards in order, one optimizer, no merging."""
    model = net.copy()
    opt = Optimizer(cfg.optimizer)
    shards = epoch_shards(egs, cfg)
    lrs = []
    for it in range(iters):
        lr = lr_at(cfg.schedule, it)
        lrs.append(lr)
        shard = shards[it]
        for b in range(0, len(shard), cfg.minibatch_chunks):
            chunks = shard[b:b + cfg.minibatch_chunks]
            fwd = model.forward(np.stack([c.input for c in chunks]))
            dy = np.zeros(fwd.output.shape)
            for n, c in enumerate(chunks):
                out = chain_loss(c.supervision, den, pi, fwd.output[n, ::3], cfg.chain_opts)
                dy[n, ::3] = (-1.0 / len(chunks)) * out.grad
            opt.step(model, model.backward(fwd, dy), lr)
            model.accumulate_bn_stats(fwd)
    return model, lrs


class TestTrain:
    def test_single_job_is_sequential(self, toy):
        egs, den, pi = toy
        cfg = TrainConfig(num_epochs=1, num_shards=3, minibatch_chunks=4, xent_regularize=0.0,
                          lr_initial=1e-2, lr_final=1e-3)
        net = toy_network(3, 3, hidden=8)
        assert cfg.total_iters == 3
        model, log = train(cfg, egs, egs[:4], net, den, pi)
        ref, lrs = sequential_oracle(cfg, egs, net, den, pi, 3)
        assert params_equal(model, ref)
        assert [r.lr for r in log.records] == lrs

    def test_logged_lr_and_counts(self, toy):
        egs, den, pi = toy
        cfg = TrainConfig(num_epochs=2, num_jobs=2, num_shards=4, minibatch_chunks=8)
        _, log = train(cfg, egs, [], toy_network(3, 3, hidden=8), den, pi)
        assert len(log.records) == cfg.total_iters == 4
        for r in log.records:
            assert r.lr == lr_at(cfg.schedule, r.iter)
            assert r.num_skipped == 0
            assert math.isnan(r.valid_objf)
        assert [r.epoch for r in log.records] == [0, 0, 1, 1]
        assert sum(r.num_chunks for r in log.records) == 2 * len(egs)
        assert log.to_tsv().count("\n") == 5

    def test_deterministic(self, toy):
        egs, den, pi = toy
        cfg = TrainConfig(num_epochs=1, num_shards=2, seed=4)
        runs = [train(cfg, egs, egs[:4], toy_network(3, 3, hidden=8), den, pi)[1].objf_values
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_improves(self, toy):
        egs, den, pi = toy
        cfg = TrainConfig(num_epochs=4, num_shards=2, lr_initial=3e-3, lr_final=1e-3)
        net = toy_network(3, 3, hidden=16)
        before = compute_objf(net, egs, den, pi, cfg.chain_opts)[0]
        model, log = train(cfg, egs, egs, net, den, pi)
        assert log.records[-1].valid_objf > before

    def test_divergence(self, toy):
        egs, den, pi = toy
        net = toy_network(3, 3, hidden=8)
        net.params[0]["W"][:] = np.nan
        with pytest.raises(TrainingDivergedError, match="non-finite network output"):
            train(TrainConfig(num_epochs=1), egs, [], net, den, pi)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(num_jobs=0)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        assert TrainConfig(num_epochs=5, num_jobs=2, num_shards=3).total_iters == 8
