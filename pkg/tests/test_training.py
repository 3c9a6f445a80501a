import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phonocard.errors import ClassMissing, ConfigError, DivergenceError, InsufficientData
from phonocard.features import MfccExtractor
from phonocard.model import ModelConfig, build_variant
from phonocard.nn import checkpoint
from phonocard.nn.layers import bce_loss
from phonocard.signal_io import Label
from phonocard.synthetic import toy_dataset
from phonocard.training import (PatientPrediction, TrainConfig, aggregate_patient,
                                aggregate_patients, average_rows, balanced_batches,
                                compute_metrics, evaluate_cycles, evaluate_patients,
                                metrics_from_predictions, patient_metrics, train)


def smallest_fraction(percent, tol=0.01):
    """Brute-force the count pair k/n with the smallest n within ``tol`` of a printed percentage."""
    for n in range(1, 10_000):
        for k in range(n + 1):
            if abs(100 * k / n - percent) < tol:
                return k, n
    raise AssertionError(percent)


class TestSampler:
    def test_paper_batch(self, rng):
        labels = np.r_[np.zeros(500, int), np.ones(150, int)]
        for b in balanced_batches(labels, 128, rng):
            assert b.size == 128 and labels[b].sum() == 64

    def test_equal_classes(self, rng):
        labels = np.r_[np.zeros(10, int), np.ones(10, int)]
        batches = balanced_batches(labels, 4, rng)
        assert len(batches) == 5
        assert all(labels[b].sum() == 2 for b in batches)
        assert sorted(np.concatenate(batches)) == list(range(20))

    def test_oversampling(self, rng):
        labels = np.r_[np.zeros(100, int), np.ones(10, int)]
        batches = balanced_batches(labels, 20, rng)
        assert len(batches) == 10
        assert all(labels[b].sum() == 10 for b in batches)
        abn = np.concatenate([b[labels[b] == 1] for b in batches])
        assert abn.size == 100
        np.testing.assert_array_equal(np.bincount(abn - 100), 10)
        normal = np.concatenate([b[labels[b] == 0] for b in batches])
        assert np.unique(normal).size == normal.size == 100

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 60), st.integers(1, 60), st.integers(1, 8), st.integers(0, 999))
    def test_properties(self, n_neg, n_pos, half, seed):
        labels = np.r_[np.zeros(n_neg, int), np.ones(n_pos, int)]
        batches = balanced_batches(labels, 2 * half, seed)
        major = max(n_neg, n_pos)
        assert len(batches) == max(1, major // half)
        for b in batches:
            assert labels[b].sum() == half and b.size == 2 * half
        if major >= half:
            major_cls = 0 if n_neg >= n_pos else 1
            seen = np.concatenate([b[labels[b] == major_cls] for b in batches])
            assert np.unique(seen).size == seen.size

    def test_deterministic(self):
        labels = np.r_[np.zeros(30, int), np.ones(7, int)]
        a = balanced_batches(labels, 6, 9)
        b = balanced_batches(labels, 6, 9)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_class_missing(self, rng):
        with pytest.raises(ClassMissing):
            balanced_batches(np.zeros(10, int), 4, rng)


class TestMetrics:
    def test_hand_example(self):
        m = compute_metrics(tp=2, tn=3, fp=1, fn=1)
        assert round(m.accuracy, 2) == 71.43
        assert round(m.sensitivity, 2) == 66.67
        assert m.specificity == 75.0
        assert round(m.macc, 2) == 70.83

    def test_symmetric(self):
        m = compute_metrics(1, 1, 1, 1)
        assert m.accuracy == 50 and m.macc == 50

    def test_perfect(self):
        m = metrics_from_predictions([1, 0, 1, 0], [1, 0, 1, 0])
        assert m.summary() == {"accuracy": 100, "sensitivity": 100, "specificity": 100,
                               "macc": 100}
        assert all(v == 100 for row in m.class_rows() for v in row[1:])

    def test_all_normal_predictor(self):
        m = metrics_from_predictions([0, 0, 0, 0], [1, 0, 1, 0])
        assert m.sensitivity == 0 and m.specificity == 100
        assert "precision_abnormal" in m.undefined and m.precision["Abnormal"] == 0

    def test_fold_one_macc(self):
        # sensitivity and specificity as printed for the first fold
        assert (83.63 + 96.5) / 2 == pytest.approx(90.07, abs=0.01)
        tp, pos = smallest_fraction(83.63)
        tn, neg = smallest_fraction(96.5)
        assert (tp, pos, tn, neg) == (46, 55, 55, 57)
        m = compute_metrics(tp=tp, fn=pos - tp, tn=tn, fp=neg - tn)
        assert m.macc == pytest.approx(90.07, abs=0.01)

    def test_empty(self):
        with pytest.raises(InsufficientData):
            compute_metrics(0, 0, 0, 0)

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60))
    def test_matches_brute_force_recount(self, pairs):
        pred = [p for p, _ in pairs]
        truth = [t for _, t in pairs]
        m = metrics_from_predictions(pred, truth)
        tp = sum(1 for p, t in pairs if p and t)
        tn = sum(1 for p, t in pairs if not p and not t)
        fp = sum(1 for p, t in pairs if p and not t)
        fn = sum(1 for p, t in pairs if not p and t)
        assert (m.tp, m.tn, m.fp, m.fn) == (tp, tn, fp, fn)
        assert m.accuracy == pytest.approx(100 * (tp + tn) / len(pairs))
        if tp + fn:
            assert m.sensitivity == pytest.approx(100 * tp / (tp + fn))
        if tn + fp:
            assert m.specificity == pytest.approx(100 * tn / (tn + fp))
        assert m.macc == pytest.approx((m.sensitivity + m.specificity) / 2)
        for v in (m.accuracy, m.sensitivity, m.specificity, m.macc, *m.f1.values()):
            assert 0 <= v <= 100

    def test_average_rows(self):
        avg = average_rows([{"a": 1.0, "b": 4.0}, {"a": 3.0, "b": 0.0}])
        assert avg == {"a": 2.0, "b": 2.0}


class TestAggregation:
    @pytest.mark.parametrize("probs,verdict", [
        ([0.9, 0.8, 0.2], Label.ABNORMAL),
        ([0.1, 0.2, 0.3], Label.NORMAL),
        ([0.9, 0.1], Label.ABNORMAL),
        ([0.5], Label.ABNORMAL),
    ])
    def test_majority(self, probs, verdict):
        assert aggregate_patient(probs).predicted is verdict

    def test_mean_rule(self):
        assert aggregate_patient([0.9, 0.4, 0.45], rule="mean").predicted is Label.ABNORMAL
        assert aggregate_patient([0.9, 0.4, 0.45]).predicted is Label.NORMAL
        with pytest.raises(ConfigError):
            aggregate_patient([0.4], rule="vote")

    def test_empty(self):
        with pytest.raises(InsufficientData):
            aggregate_patient([])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms())
    def test_order_invariant(self, probs, random):
        shuffled = probs[:]
        random.shuffle(shuffled)
        assert aggregate_patient(probs).predicted is aggregate_patient(shuffled).predicted

    def test_single_cycle_patients_reduce_to_cycles(self, rng):
        probs = rng.uniform(size=30)
        labels = rng.integers(0, 2, 30)
        pids = [f"p{i}" for i in range(30)]
        pm = patient_metrics(aggregate_patients(probs, labels, pids))
        cm = metrics_from_predictions(probs >= 0.5, labels == 1)
        assert (pm.tp, pm.tn, pm.fp, pm.fn) == (cm.tp, cm.tn, cm.fp, cm.fn)

    def test_counts_sum_to_patients(self, rng):
        pids = rng.integers(0, 12, 200).astype(str)
        labels = (pids.astype(int) % 2).astype(int)
        pm = patient_metrics(aggregate_patients(rng.uniform(size=200), labels, pids))
        assert pm.total == np.unique(pids).size

    def test_mixed_patient_rejected(self):
        with pytest.raises(ValueError):
            aggregate_patients([0.1, 0.9], [0, 1], ["a", "a"])


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=7)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(variant="Transformer")


@pytest.fixture(scope="module")
def toy():
    waves, labels, pids = toy_dataset(120, seed=1, patients=12)
    return waves, MfccExtractor()(waves), labels, pids


class TestTrainLoop:
    def test_first_batch_loss_is_untrained_bce(self, toy):
        waves, mfccs, labels, _ = toy
        idx = np.r_[np.flatnonzero(labels == 0)[:4], np.flatnonzero(labels == 1)[:4]]
        cfg = TrainConfig(epochs=1, batch_size=8, seed=3, variant="RnnMfcc")
        ref = build_variant("RnnMfcc", seed=0)
        (batch,) = balanced_batches(labels[idx], 8, np.random.default_rng(3))
        p, _ = ref.forward(waves[idx][batch], mfccs[idx][batch], training=True)
        expected, _ = bce_loss(p, labels[idx][batch])
        result = train(build_variant("RnnMfcc", seed=0), waves[idx], mfccs[idx], labels[idx], cfg)
        assert result.history[0]["loss"] == expected

    def test_deterministic(self, toy):
        waves, mfccs, labels, _ = toy
        cfg = TrainConfig(epochs=2, batch_size=16, seed=5, variant="Full")
        model_cfg = ModelConfig.reduced(input_length=2500, divisor=8)
        runs = []
        for _ in range(2):
            model = build_variant("Full", 0, model_cfg)
            res = train(model, waves[:40], mfccs[:40], labels[:40], cfg)
            runs.append((res.history, checkpoint.encode(*model.to_checkpoint())))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_learns_separable_toy(self, toy):
        waves, mfccs, labels, pids = toy
        model = build_variant("RnnMfcc", seed=0)
        epochs = []
        res = train(model, waves, mfccs, labels,
                    TrainConfig(epochs=10, batch_size=16, variant="RnnMfcc"),
                    on_epoch=lambda e, m, rec: epochs.append(e))
        assert epochs == list(range(1, 11))
        assert res.history[-1]["loss"] < 0.2
        test_w, test_l, test_p = toy_dataset(40, seed=99, patients=8)
        test_m = MfccExtractor()(test_w)
        metrics, p = evaluate_cycles(model, test_w, test_m, test_l)
        assert metrics.accuracy >= 90
        pair = [np.flatnonzero(test_l == 0)[0], np.flatnonzero(test_l == 1)[0]]
        p_normal, p_abnormal = model.predict_proba(test_w[pair], test_m[pair])
        assert p_abnormal - p_normal >= 0.5
        pm, patients = evaluate_patients(model, test_w, test_m, test_l, test_p)
        assert pm.total == len(patients) == 8
        assert all(isinstance(x, PatientPrediction) for x in patients)

    def test_divergence(self, toy):
        waves, mfccs, labels, _ = toy
        bad = mfccs[:16].copy()
        bad[3] = np.nan
        with pytest.raises(DivergenceError) as err:
            train(build_variant("RnnMfcc", 0), waves[:16], bad, labels[:16],
                  TrainConfig(epochs=1, batch_size=8, variant="RnnMfcc"))
        assert err.value.epoch == 1

    def test_empty_evaluation(self):
        with pytest.raises(InsufficientData):
            evaluate_cycles(build_variant("RnnMfcc"), None, np.zeros((0, 18, 13)), [])
