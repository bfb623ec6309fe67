import numpy as np
import pytest

from purifier import data, nncore, target
from purifier.data import SplitPlan, synthesize, two_gaussians_spec
from purifier.target import (
    ClassifierConfig,
    accuracy,
    predict_confidence,
    train_target,
)


@pytest.fixture(scope="module")
def toy_model():
    ds = synthesize(two_gaussians_spec(n=120, separation=2.0, seed=0))
    cfg = ClassifierConfig(hidden_sizes=(16,), epochs=50, lr=5e-3, seed=0)
    model, report = train_target(cfg, ds, ds)
    return ds, model, report


class TestTrainTarget:
    def test_separable_toy_reaches_high_train_accuracy(self, toy_model):
        _, _, report = toy_model
        assert report.acc_train >= 0.99

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            ClassifierConfig(epochs=0)

    def test_accuracy_recomputable_from_saved_model(self, toy_model, tmp_path):
        ds, model, report = toy_model
        path = tmp_path / "target.prfm"
        nncore.save_model(model, path)
        loaded = nncore.load_model(path)
        assert accuracy(loaded, ds) == report.acc_train

    def test_overfit_gap_enforced_when_requested(self):
        ds = synthesize(two_gaussians_spec(n=120, separation=2.0, seed=1))
        cfg = ClassifierConfig(hidden_sizes=(16,), epochs=50, lr=5e-3, seed=0,
                               min_overfit_gap=0.5)
        with pytest.raises(target.OverfitRegimeError):
            train_target(cfg, ds, ds)

    def test_loss_curve_recorded(self, toy_model):
        _, _, report = toy_model
        assert len(report.loss_curve) == report.epochs
        assert report.loss_curve[-1] < report.loss_curve[0]


class TestPredictConfidence:
    def test_rows_on_simplex(self, toy_model):
        ds, model, _ = toy_model
        conf = predict_confidence(model, ds.X)
        assert np.all(conf >= 0)
        assert np.allclose(conf.sum(axis=1), 1.0, atol=1e-6)

    def test_single_sample_matches_batch(self, toy_model):
        # BLAS may round a 1-row matmul differently from the same row inside
        # a larger batch, so consistency here means equal values, not bytes
        ds, model, _ = toy_model
        batch = predict_confidence(model, ds.X[:5])
        for i in range(5):
            single = predict_confidence(model, ds.X[i])
            assert np.allclose(single, batch[i], rtol=0, atol=1e-12)

    def test_argmax_is_downstream_prediction(self, toy_model):
        ds, model, _ = toy_model
        conf = predict_confidence(model, ds.X)
        assert np.array_equal(
            np.argmax(conf, axis=1), target.predicted_labels(model, ds.X)
        )

    def test_dim_mismatch(self, toy_model):
        _, model, _ = toy_model
        with pytest.raises(nncore.DimensionMismatch):
            predict_confidence(model, np.zeros((1, 5)))
