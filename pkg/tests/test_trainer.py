from types import SimpleNamespace

import numpy as np
import pytest

from planting.data import make_synthetic, split_holdout, standardize
from planting.gradcore import Tensor
from planting.model import ArchitectureSpec, ChannelConfig, build_network, plant_channels
from planting.trainer import (
    EpochLog,
    EpochRecord,
    OptimizerState,
    TrainConfig,
    evaluate,
    lr_at_epoch,
    sgd_step,
    stl_milestones,
    train,
)

SPEC = ArchitectureSpec.cifar(num_classes=2, input_hw=(8, 8))


@pytest.fixture(scope="module")
def toy():
    ds = make_synthetic(2, 24, SPEC.input_shape, 0, separation=2.0)
    train_set, val_set = split_holdout(ds, 12, 1)
    return standardize(train_set, val_set)


def scalar_net(w0):
    return SimpleNamespace(params={"w": Tensor(np.array([w0]))}, frozen={"w": np.array([False])})


class TestSchedule:
    @pytest.mark.parametrize("epoch,expected", [(0, 0.01), (39, 0.01), (40, 0.002), (80, 0.0004), (121, 8e-5)])
    def test_cifar_schedule(self, epoch, expected):
        assert lr_at_epoch(TrainConfig(), epoch) == pytest.approx(expected, rel=1e-12)

    def test_stl_schedule(self):
        cfg = TrainConfig(epochs=100, milestones=stl_milestones(100), lr_factor=0.1)
        assert cfg.milestones == (33, 66)
        assert lr_at_epoch(cfg, 32) == pytest.approx(0.01)
        assert lr_at_epoch(cfg, 34) == pytest.approx(0.001)
        assert lr_at_epoch(cfg, 99) == pytest.approx(1e-4)

    def test_config_validation(self):
        for bad in ({"learning_rate": 0}, {"momentum": 1.0}, {"lam": 1.5}, {"kl_form": "x"}, {"batch_size": 0}):
            with pytest.raises(ValueError):
                TrainConfig(**bad)

    def test_config_round_trip(self):
        cfg = TrainConfig(lam=0.0, milestones=(3, 6))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.loss_name == "KLLoss" and TrainConfig().loss_name == "CELoss"


class TestSGD:
    def test_two_momentum_steps(self):
        net = scalar_net(1.0)
        state = OptimizerState({"w": np.zeros(1)})
        cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
        sgd_step(net, {"w": np.array([1.0])}, state, 0.1, cfg)
        assert state.buffers["w"][0] == pytest.approx(1.0) and net.params["w"].value[0] == pytest.approx(0.9)
        sgd_step(net, {"w": np.array([1.0])}, state, 0.1, cfg)
        assert state.buffers["w"][0] == pytest.approx(1.9) and net.params["w"].value[0] == pytest.approx(0.71)

    def test_weight_decay_recursion(self):
        lr, mu, wd = 0.05, 0.9, 0.01
        net = scalar_net(2.0)
        state = OptimizerState({"w": np.zeros(1)})
        cfg = TrainConfig(momentum=mu, weight_decay=wd)
        w, v = 2.0, 0.0
        for _ in range(10):
            sgd_step(net, {"w": np.array([0.3])}, state, lr, cfg)
            v = mu * v + (0.3 + wd * w)
            w = w - lr * v
        assert net.params["w"].value[0] == pytest.approx(w, rel=1e-12)

    def test_shape_mismatch(self):
        net = scalar_net(1.0)
        with pytest.raises(ValueError):
            sgd_step(net, {"w": np.zeros(2)}, OptimizerState({"w": np.zeros(1)}), 0.1, TrainConfig())


class TestTrain:
    def test_frozen_entries_never_move(self, toy):
        train_set, _ = toy
        net = plant_channels(build_network(SPEC, ChannelConfig.uniform(2), 0), [2, 4], 2, 1)
        # 100 optimizer steps: batch 6 over 12 samples for 50 epochs
        cfg = TrainConfig(learning_rate=0.05, batch_size=6, epochs=50, milestones=(), weight_decay=5e-4)
        trained, _ = train(net, train_set, cfg)
        moved = False
        for name, p in trained.params.items():
            frozen = net.frozen[name]
            assert np.array_equal(p.value[frozen], net.params[name].value[frozen]), name
            moved |= not np.array_equal(p.value[~frozen], net.params[name].value[~frozen])
        assert moved

    def test_deterministic(self, toy):
        train_set, val_set = toy
        net = build_network(SPEC, ChannelConfig.uniform(2), 3)
        cfg = TrainConfig(epochs=3, batch_size=5, milestones=(2,), seed=4)
        a, log_a = train(net, train_set, cfg, val=val_set)
        b, log_b = train(net, train_set, cfg, val=val_set)
        assert a.same_as(b) and log_a == log_b
        c, _ = train(net, train_set, cfg.with_(seed=5))
        assert not a.same_as(c)

    def test_input_and_teacher_untouched(self, toy):
        train_set, val_set = toy
        student = build_network(SPEC, ChannelConfig.uniform(2), 0)
        teacher = build_network(SPEC, ChannelConfig.uniform(4), 1)
        s0, t0 = student.copy(), teacher.copy()
        train(student, train_set, TrainConfig(epochs=2, batch_size=4, lam=0.0), teacher=teacher, val=val_set)
        assert student.same_as(s0) and teacher.same_as(t0)

    def test_loss_decreases(self, toy):
        train_set, _ = toy
        net = build_network(SPEC, ChannelConfig.uniform(4), 2)
        before, _ = evaluate(net, train_set)
        trained, log = train(net, train_set, TrainConfig(learning_rate=0.001, batch_size=4, epochs=10, milestones=()))
        after, _ = evaluate(trained, train_set)
        assert after < before
        assert log[-1].lr == 0.001 and len(log) == 10

    def test_missing_teacher(self, toy):
        with pytest.raises(ValueError, match="teacher"):
            train(build_network(SPEC, ChannelConfig.uniform(2), 0), toy[0], TrainConfig(lam=0.5, epochs=1))

    def test_empty_data(self, toy):
        with pytest.raises(ValueError, match="empty"):
            train(build_network(SPEC, ChannelConfig.uniform(2), 0), toy[0].subset(np.arange(0)), TrainConfig())


def test_epoch_log_csv_round_trip():
    log = EpochLog([EpochRecord(0, 0.01, 1.25, 0.5, float("nan"), float("nan")),
                    EpochRecord(1, 0.002, 0.1 + 0.2, 0.75, 0.9, 1.0)])
    back = EpochLog.from_csv(log.to_csv())
    assert back[1] == log[1]
    assert np.isnan(back[0].val_loss) and back[0].train_loss == 1.25
    assert log.to_csv().splitlines()[0] == "epoch,lr,train_loss,train_acc,val_loss,val_acc"
