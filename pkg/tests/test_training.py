import math

import numpy as np
import pytest

from diffquant import training
from diffquant.cost import PenaltyConfig, resolve_bits
from diffquant.data import synthetic_classification
from diffquant.nn import LearnableQuantizer, Network, QuantDense
from diffquant.quantizer import Quantizer, project
from diffquant.training import (
    DivergenceError,
    TrainConfig,
    bitwidth_report,
    build_toy_model,
    init_quantizers,
    initial_latent,
    network_spec,
    pretrained_step,
    read_log_csv,
    report_to_csv,
    train,
)


@pytest.fixture(scope="module")
def toy_data():
    return synthetic_classification(0, 300, classes=3, dim=8)


def toy(param="U3", seed=0):
    return build_toy_model(8, 3, param, hidden=(16,), seed=seed)


def state(net):
    return [p.value.copy() for p in net.parameters()]


class TestInit:
    def test_pretrained_step(self):
        assert pretrained_step(np.array([0.7, -0.1])) == 2.0**-4
        assert pretrained_step(np.array([-7.0])) == 1.0

    def test_all_zero_weights_fall_back(self):
        assert pretrained_step(np.zeros(5)) == 2.0**-3

    def test_pretrained_latent(self):
        d, qm = initial_latent("U3", 4, True, False, step=pretrained_step(np.array([0.7])))
        assert (d, qm) == (2.0**-4, 0.4375)

    def test_random_init(self):
        for lq in toy().quantizers():
            eff = project(lq.quantizer)
            if lq.quantizer.signed:
                assert (eff.d, eff.q_max) == (0.125, 0.875)
            else:
                assert (eff.d, eff.q_max) == (0.125, 1.875)

    @pytest.mark.parametrize("param", ["U1", "U2", "U3", "P1", "P2", "P3"])
    def test_every_parametrization_starts_at_four_bits(self, param):
        assert all(r["b_w"] == 4 and r["b_x"] in (4, 32) for r in bitwidth_report(toy(param)))

    def test_pretrained_init_on_network(self):
        lq_w = LearnableQuantizer(Quantizer("U3", (1.0, 1.0)))
        layer = QuantDense(1, 1, lq_w, None)
        layer.W.value = np.array([[0.7]])
        init_quantizers(Network([layer], (1,)), pretrained=True)
        eff = project(lq_w.quantizer)
        assert (eff.d, eff.q_max) == (2.0**-4, 0.4375)

    def test_pow2_pretrained_q_max(self):
        lq_w = LearnableQuantizer(Quantizer("P3", (0.5, 1.0)))
        layer = QuantDense(1, 1, lq_w, None)
        layer.W.value = np.array([[3.1]])
        init_quantizers(Network([layer], (1,)), pretrained=True)
        assert project(lq_w.quantizer).q_max == 4.0


class TestReport:
    def test_single_layer(self):
        layer = QuantDense(4, 2, LearnableQuantizer(Quantizer("U3", (0.125, 0.875))), None)
        rows = bitwidth_report(Network([layer], (4,)))
        assert rows == [{"layer": 0, "name": "dense", "kind": "dense", "b_w": 4, "b_x": 32,
                         "S_w_bits": 40, "S_x_bits": 64}]

    def test_activation_memory_uses_reader_bits(self):
        rows = bitwidth_report(toy())
        assert [r["b_x"] for r in rows] == [4, 32]

    def test_csv(self):
        text = report_to_csv(bitwidth_report(toy()))
        assert text.splitlines()[0] == "layer,name,kind,b_w,b_x,S_w_bits,S_x_bits"
        assert len(text.splitlines()) == 3

    def test_spec_tracks_live_quantizers(self):
        net = toy()
        spec = network_spec(net)
        net.quantizers()[0].latent.value = np.array([0.125, 1.875])
        assert resolve_bits(spec.bits_w[0]) == 5


class TestTrain:
    def test_zero_lr_is_identity(self, toy_data):
        net = toy()
        before = state(net)
        log = train(net, toy_data, TrainConfig(steps=5, lr=0.0, batch_size=len(toy_data)))
        for a, b in zip(before, state(net)):
            np.testing.assert_array_equal(a, b)
        assert len({r.loss for r in log.records}) == 1

    def test_record_count(self, toy_data):
        assert len(train(toy(), toy_data, TrainConfig(steps=7))) == 7

    def test_deterministic(self, toy_data):
        cfg = TrainConfig(steps=20, lr=0.05, seed=3)
        a, b = toy(), toy()
        assert train(a, toy_data, cfg).to_csv() == train(b, toy_data, cfg).to_csv()

    def test_learns(self, toy_data):
        net = toy()
        start = training.evaluate(net, toy_data).loss
        train(net, toy_data, TrainConfig(steps=200, lr=0.01))
        assert training.evaluate(net, toy_data).loss < 0.5 * start

    def test_schedule_logged(self, toy_data):
        log = train(toy(), toy_data, TrainConfig(steps=6, lr=0.1, milestones=(2, 4)))
        assert [r.lr for r in log.records] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])

    def test_penalty_shrinks_weights(self, toy_data):
        s0 = bitwidth_report(toy())
        budget = 0.5 * sum(r["S_w_bits"] for r in s0)
        cfg = TrainConfig(steps=300, lr=0.01, penalty=PenaltyConfig(S0_w=budget, lambdas=(1.0, 0, 0)))
        net = toy()
        log = train(net, toy_data, cfg)
        assert log.records[-1].g[0] < log.records[0].g[0]
        assert log.records[0].penalty > 0

    def test_auto_lambda_balances_initial_loss(self, toy_data):
        budget = 0.5 * sum(r["S_w_bits"] for r in bitwidth_report(toy()))
        cfg = TrainConfig(steps=1, penalty=PenaltyConfig(S0_w=budget, surrogate="smooth"),
                          auto_lambda=True)
        log = train(toy(), toy_data, cfg)
        assert log.lambdas[1:] == (0.0, 0.0)
        assert log.records[0].penalty == pytest.approx(log.records[0].loss, rel=0.3)

    def test_divergence_guard(self, toy_data, monkeypatch):
        real = training.softmax_cross_entropy

        def exploding(logits, labels):
            out = real(logits, labels)
            return type(out)(math.inf, out.grad)

        monkeypatch.setattr(training, "softmax_cross_entropy", exploding)
        with pytest.raises(DivergenceError) as info:
            train(toy(), toy_data, TrainConfig(steps=50))
        assert info.value.step == training.DIVERGENCE_PATIENCE - 1
        assert len(info.value.log) == training.DIVERGENCE_PATIENCE

    def test_latents_stay_in_bounds(self, toy_data):
        net = toy()
        train(net, toy_data, TrainConfig(steps=50, lr=0.5))
        for lq in net.quantizers():
            q = lq.quantizer
            assert q == q.clipped()

    def test_csv_roundtrip(self, toy_data):
        log = train(toy(), toy_data, TrainConfig(steps=3))
        rows = read_log_csv(log.to_csv())
        assert len(rows) == 3
        assert rows[2]["loss"] == log.records[2].loss
        assert rows[0]["fc0.theta_w.b"] == 4
        assert math.isnan(rows[0]["g_w"])

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="lbfgs")
        with pytest.raises(ValueError):
            TrainConfig(param="U4")
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_penalty_dict_config(self):
        cfg = TrainConfig(penalty={"S0_w": 100.0, "lambdas": [1, 0, 0]})
        assert cfg.penalty.lambdas == (1, 0, 0)
        assert TrainConfig(**{**cfg.to_dict(), "penalty": cfg.to_dict()["penalty"]}) == cfg
