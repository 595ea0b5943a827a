import numpy as np
import pytest

from flowtrainer.synth import generate_dataset
from flowtrainer.training import TrainingConfig, compute_scalers, train


class TestTraining:
    def test_zero_epochs_returns_initialized_model(self, small_dataset):
        trained = train(small_dataset, TrainingConfig(seed=0, max_epochs=0))
        assert trained.history == []
        assert trained.model is not None
        assert trained.scaler_mins.shape == (28,)

    def test_loss_decreases_within_five_epochs(self, small_dataset):
        trained = train(small_dataset, TrainingConfig(seed=0, max_epochs=5,
                                                      batch_size=128))
        losses = [h["train"] for h in trained.history]
        assert losses[-1] < losses[0]

    def test_pos_weight_equals_class_ratio(self, small_dataset):
        trained = train(small_dataset, TrainingConfig(seed=0, max_epochs=0))
        n_attack = small_dataset.labels.sum()
        n_benign = small_dataset.n_flows - n_attack
        assert trained.pos_weight == pytest.approx(n_benign / n_attack)

    def test_scalers_cover_training_data(self, small_dataset):
        mins, maxs = compute_scalers(small_dataset.features)
        flat = small_dataset.features.reshape(-1, 28)
        assert np.all(flat >= mins - 1e-9)
        assert np.all(flat <= maxs + 1e-9)

    def test_deterministic_history(self, small_dataset):
        cfg = TrainingConfig(seed=4, max_epochs=3, batch_size=256)
        a = train(small_dataset, cfg)
        b = train(small_dataset, cfg)
        assert a.history == b.history

    def test_early_stopping_bounds_epochs(self):
        # a tiny, instantly-overfit dataset stops well before max_epochs
        ds = generate_dataset(n_flows=60, seed=3)
        cfg = TrainingConfig(seed=0, max_epochs=60, batch_size=32,
                             early_stop_patience=3)
        trained = train(ds, cfg)
        assert len(trained.history) < 60
