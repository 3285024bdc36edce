import json

import numpy as np
import pytest
import torch

from rise.errors import ConfigError, MetricError, NonFiniteLossError
from rise.model import LinearClassifier, RadialClassifier
from rise.synthdata import SampleSet, build_benchmark, complete_protocol
from rise.trainer import (
    Ablation, AdamState, MetricsReport, TrainConfig, adam_step, balanced_batches, coarse_arms,
    evaluate, fine_arms, run_experiment, train_model, with_ablation,
)


def toy_samples(n_domains, per_class):
    dom = np.repeat(np.arange(n_domains), 2 * per_class)
    y = np.tile(np.repeat([0, 1], per_class), n_domains)
    n = len(y)
    return SampleSet(np.zeros((n, 1, 1)), y, dom, np.where(y == 1, 0, -1), np.ones((n, 1), bool))


TINY = TrainConfig(lr=1e-3, batch_size=12, epochs=2, grid=(2, 2), hidden=8, feat_dim=8)


def tiny_data(seed=0):
    return build_benchmark(seed=seed, n_per_domain=48, dim=4)


class TestBalancedBatches:
    def test_three_domains_batch_48(self):
        s = toy_samples(3, 100)
        for idx in balanced_batches(s, 48, np.random.default_rng(0)):
            assert len(idx) == 48
            for e in range(3):
                in_dom = s.domain[idx] == e
                assert in_dom.sum() == 16
                assert (s.y[idx][in_dom] == 0).sum() == 8

    def test_two_domains_batch_4(self):
        s = toy_samples(2, 5)
        for idx in balanced_batches(s, 4, np.random.default_rng(0)):
            for e in range(2):
                assert sorted(s.y[idx][s.domain[idx] == e]) == [0, 1]

    def test_odd_share_within_one(self):
        s = toy_samples(3, 50)
        for idx in balanced_batches(s, 15, np.random.default_rng(1)):
            for e in range(3):
                ys = s.y[idx][s.domain[idx] == e]
                assert len(ys) == 5 and abs((ys == 0).sum() - (ys == 1).sum()) == 1

    def test_epoch_counts(self):
        dom = np.r_[np.zeros(100), np.ones(60), np.full(40, 2)].astype(int)
        y = np.r_[np.tile([0, 1], 50), np.tile([0, 1], 30), np.tile([0, 1], 20)]
        s = SampleSet(np.zeros((200, 1, 1)), y, dom, np.where(y == 1, 0, -1), np.ones((200, 1), bool))
        counts = np.zeros(3)
        batches = list(balanced_batches(s, 12, np.random.default_rng(2)))
        assert len(batches) == 200 // 12
        for idx in batches:
            counts += np.bincount(s.domain[idx], minlength=3)
        assert counts.max() - counts.min() <= 12

    def test_no_repeats_within_a_pass(self):
        s = toy_samples(2, 20)
        idx = np.concatenate(list(balanced_batches(s, 8, np.random.default_rng(3))))
        assert len(idx) == 80 and len(set(idx.tolist())) == 80

    def test_infeasible(self):
        with pytest.raises(ConfigError):
            next(balanced_batches(toy_samples(3, 10), 10, np.random.default_rng(0)))
        with pytest.raises(ConfigError):
            next(balanced_batches(toy_samples(3, 10), 3, np.random.default_rng(0)))
        s = toy_samples(2, 4)
        s.y[s.domain == 1] = 0
        with pytest.raises(ConfigError):
            next(balanced_batches(s, 4, np.random.default_rng(0)))


class TestAdam:
    def test_zero_gradient_no_decay(self):
        p = torch.tensor([1.0, -2.0], dtype=torch.float64)
        adam_step([p], [torch.zeros(2, dtype=torch.float64)], AdamState(), lr=0.1)
        assert p.tolist() == [1.0, -2.0]

    def test_first_step_is_lr(self):
        for g in (0.01, 3.0, -50.0):
            p = torch.tensor(0.0, dtype=torch.float64)
            adam_step([p], [torch.tensor(g, dtype=torch.float64)], AdamState(), lr=1e-3)
            assert abs(abs(p.item()) - 1e-3) < 1e-8
            assert np.sign(p.item()) == -np.sign(g)

    def test_quadratic_convergence(self):
        x = torch.tensor(5.0, dtype=torch.float64)
        state = AdamState()
        for _ in range(2000):
            adam_step([x], [2 * x], state, lr=1e-2)
        assert abs(x.item()) < 1e-3

    @pytest.mark.parametrize("decoupled", [False, True])
    def test_matches_torch_reference(self, decoupled):
        rng = np.random.default_rng(0)
        init = rng.standard_normal(5)
        ours = torch.tensor(init)
        ref = torch.nn.Parameter(torch.tensor(init))
        cls = torch.optim.AdamW if decoupled else torch.optim.Adam
        opt = cls([ref], lr=1e-2, weight_decay=0.1)
        state = AdamState()
        for _ in range(20):
            g = torch.tensor(rng.standard_normal(5))
            adam_step([ours], [g], state, lr=1e-2, weight_decay=0.1, decoupled=decoupled)
            ref.grad = g.clone()
            opt.step()
        np.testing.assert_allclose(ours.numpy(), ref.detach().numpy(), atol=1e-12)

    def test_state_mismatch(self):
        state = AdamState()
        adam_step([torch.zeros(2)], [torch.ones(2)], state, lr=0.1)
        with pytest.raises(ConfigError):
            adam_step([torch.zeros(3)], [torch.ones(3)], state, lr=0.1)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (5e-5, 1e-3, 24, 60)
        assert cfg.radius_init == 0.0 and cfg.threshold == "eer"

    def test_flat_round_trip(self):
        cfg = TrainConfig(lr=1e-3, grid=(4, 4), ablation=Ablation(irm_type="sym-linear", shuffle=False))
        flat = cfg.to_flat()
        assert flat["ablation.irm_type"] == "sym-linear" and flat["weights.irm"] == 0.5
        assert TrainConfig.from_flat(json.loads(json.dumps(flat))) == cfg

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=0)
        with pytest.raises(ConfigError):
            TrainConfig(threshold="dev")
        with pytest.raises(ConfigError):
            TrainConfig.from_flat({"nonsense": 1})
        with pytest.raises(ConfigError):
            TrainConfig.from_flat({"ablation.flavour": 1})
        with pytest.raises(ConfigError):
            Ablation(irm_type="v1")


class TestArms:
    def test_baseline_semantics(self):
        base = coarse_arms()["baseline"]
        assert base.head() == "linear"
        sw = base.switches()
        assert not sw.irm and not sw.angular and not base.mmsd

    def test_coarse_grid(self):
        arms = coarse_arms()
        assert {(a.asyirm, a.mmsd) for a in arms.values()} == {(False, False), (True, False),
                                                                (False, True), (True, True)}

    def test_fine_grid(self):
        arms = fine_arms()
        combos = {(a.mix_domain, a.target, a.shuffle) for k, a in arms.items() if k[1] == "-"}
        assert len(combos) == 16
        assert arms["irm-reversed"].head() == "reversed"
        assert arms["irm-vanilla"].head() == "linear" and arms["irm-vanilla"].switches().irm
        assert not arms["no-align"].switches().irm and arms["no-align"].head() == "radial"
        assert not arms["no-angular"].switches().angular


class TestTraining:
    def test_deterministic(self):
        ds = tiny_data()
        a = run_experiment(TINY, ds, complete_protocol(3)).report
        b = run_experiment(TINY, ds, complete_protocol(3)).report
        assert a.to_json() == b.to_json()

    def test_heads_follow_ablation(self):
        ds = tiny_data()
        train = SampleSet.concat([ds.domains[e] for e in (0, 1, 2)])
        model, _, _ = train_model(with_ablation(TINY, coarse_arms()["baseline"]), train)
        assert isinstance(model.global_classifier, LinearClassifier)
        model, _, rows = train_model(with_ablation(TINY, fine_arms()["irm-reversed"]), train)
        assert isinstance(model.global_classifier, RadialClassifier) and model.global_classifier.reversed
        assert rows[-1]["radius_global"] > 0

    def test_trace_and_outputs(self, tmp_path):
        res = run_experiment(TINY, tiny_data(), complete_protocol(3), out_dir=tmp_path)
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["policy"] == "eer" and len(report["epochs"]) == 2
        header = (tmp_path / "trace.csv").read_text().splitlines()[0].split(",")
        assert header[:6] == ["epoch", "cls", "irm", "ang", "mmsd", "aux"]
        assert (tmp_path / "model.bin").exists() and "HTER" in (tmp_path / "report.txt").read_text()
        assert 0 <= res.report.hter <= 1

    def test_fixed_threshold_policy(self):
        cfg = TrainConfig(**{**TINY.__dict__, "threshold": "fixed"})
        assert run_experiment(cfg, tiny_data(), complete_protocol(3)).report.threshold == 0.5

    def test_nan_guard(self):
        ds = tiny_data()
        train = SampleSet.concat([ds.domains[e] for e in (0, 1, 2)])
        train.x[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLossError) as info:
            train_model(TINY, train)
        assert "parts" in info.value.dump


class TestEvaluate:
    class Fixed:
        def __init__(self, scores):
            self.scores = scores

        def spoof_score(self, x, mask=None):
            return self.scores[: len(x)]

    def samples(self, y):
        y = np.asarray(y)
        return SampleSet(np.zeros((len(y), 1, 1)), y, np.zeros(len(y), int),
                         np.where(y == 1, 0, -1), np.ones((len(y), 1), bool))

    def test_perfect_and_reversed(self):
        s = self.samples([0, 0, 1, 1])
        rep = evaluate(self.Fixed(np.array([0.1, 0.2, 0.7, 0.9])), s)
        assert rep.auc == 1.0 and rep.hter == 0.0
        rev = evaluate(self.Fixed(np.array([0.9, 0.7, 0.2, 0.1])), s)
        assert rev.auc == 0.0

    def test_single_class(self):
        with pytest.raises(MetricError):
            evaluate(self.Fixed(np.array([0.1, 0.2])), self.samples([1, 1]))

    def test_report_range_and_text(self):
        with pytest.raises(MetricError):
            MetricsReport(1.5, 0.5, 0.5, "eer", 0, 0, "p", "h")
        text = MetricsReport(0.1, 0.9, 0.4, "fixed", 0.1, 0.1, "complete", "abc").to_text()
        assert "(fixed)" in text and "complete" in text
