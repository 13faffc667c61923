from dataclasses import replace

import numpy as np
import pytest

from w2vbert.audio import generate_synthetic_corpus
from w2vbert.model import W2VBert
from w2vbert.probe import (
    ProbeError,
    eval_probe,
    fit_linear_probe,
    majority_labels,
    split_utterances,
    train_probe,
)


class TestMajorityLabels:
    @pytest.mark.parametrize("labels, expected", [
        ([1, 1, 2, 2], [1]),               # tie goes to the smaller label
        ([3, 2, 2, 3, 0], [2, 0]),
        ([5, 5, 5, 1, 1, 1, 4], [5, 1]),
        ([7], [7]),
    ])
    def test_examples(self, labels, expected):
        assert majority_labels(np.array(labels)).tolist() == expected

    def test_length_matches_encoder_rate(self):
        assert majority_labels(np.zeros(100, dtype=int)).size == 25
        assert majority_labels(np.zeros(7, dtype=int)).size == 2

    @pytest.mark.parametrize("bad", [[], [-1, 0]])
    def test_rejects(self, bad):
        with pytest.raises(ProbeError):
            majority_labels(np.array(bad, dtype=int))


class TestLinearProbe:
    def test_separable_data(self, rng):
        x = np.concatenate([rng.normal(-2, 0.3, (40, 2)), rng.normal(2, 0.3, (40, 2))])
        y = np.repeat([0, 1], 40)
        probe = fit_linear_probe(x, y, 2, steps=200)
        assert (probe.predict(x) == y).mean() == 1.0

    def test_deterministic(self, rng):
        x, y = rng.standard_normal((30, 4)), rng.integers(0, 3, 30)
        a, b = fit_linear_probe(x, y, 3, steps=20), fit_linear_probe(x, y, 3, steps=20)
        assert np.array_equal(a.weight, b.weight)


@pytest.fixture(scope="module")
def probe_corpus():
    return generate_synthetic_corpus(8, (0.5, 0.7), 4, 77)


class TestTrainProbe:
    @pytest.fixture
    def model(self, tiny_cfg):
        return W2VBert(tiny_cfg.model_config(), seed=0, dtype=np.float64)

    def test_result_and_determinism(self, model, probe_corpus):
        a = train_probe(model, probe_corpus, split_seed=1, steps=30)
        b = train_probe(model, probe_corpus, split_seed=1, steps=30)
        assert a == b
        assert 0.0 <= a.frame_accuracy <= 1.0
        assert not set(a.train_ids) & set(a.eval_ids)
        assert len(a.eval_ids) == 2

    def test_parameters_unchanged(self, model, probe_corpus):
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        train_probe(model, probe_corpus, steps=5)
        assert all(np.array_equal(before[k], p.data) for k, p in model.parameters().items())

    def test_eval_on_nothing(self, model):
        probe = fit_linear_probe(np.zeros((2, 8)), np.array([0, 1]), 2, steps=1)
        with pytest.raises(ProbeError, match="no utterances"):
            eval_probe(probe, model, [])

    def test_split_too_small(self):
        with pytest.raises(ProbeError, match="at least 2"):
            split_utterances(4, 0)

    def test_split_is_seeded_partition(self):
        tr, ev = split_utterances(24, 3)
        assert sorted(np.concatenate([tr, ev]).tolist()) == list(range(24))
        assert ev.size == 6
        assert np.array_equal(split_utterances(24, 3)[1], ev)


@pytest.fixture(scope="module")
def utts():
    return generate_synthetic_corpus(16, (0.5, 0.7), 16, 91)


class TestLabelContracts:
    @pytest.fixture
    def model(self, tiny_cfg):
        return W2VBert(tiny_cfg.model_config(), seed=0, dtype=np.float64)

    def test_constant_labels_are_trivial(self, model, utts):
        const = [replace(u, frame_labels=np.zeros_like(u.frame_labels)) for u in utts]
        res = train_probe(model, const, steps=50)
        assert res.frame_accuracy == 1.0 and res.baseline_accuracy == 1.0

    def test_random_labels_sit_at_chance(self, model, utts):
        rng = np.random.default_rng(5)
        # one draw per encoder frame, so majority pooling keeps the labels uniform
        noise = [replace(u, frame_labels=np.repeat(rng.integers(0, 16, -(-n // 4)), 4)[:n])
                 for u in utts for n in [u.frame_labels.size]]
        res = train_probe(model, noise, steps=100)
        assert abs(res.frame_accuracy - 1 / 16) <= 0.05
        assert abs(res.baseline_accuracy - 1 / 16) <= 0.05
