import numpy as np
import pytest
import torch

from flowtrainer.features import quantize_row
from flowtrainer.model import freeze_quantization
from flowtrainer.synth import generate_dataset
from flowtrainer.training import TrainingConfig, train

SMALL_FLOWS = 1200
SMALL_EPOCHS = 12


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(n_flows=SMALL_FLOWS, seed=7)


@pytest.fixture(scope="session")
def small_trained(small_dataset):
    """A quick low-budget training run shared by the cheaper tests."""
    cfg = TrainingConfig(seed=0, max_epochs=SMALL_EPOCHS, batch_size=128)
    trained = train(small_dataset, cfg)
    xq = quantize_row(small_dataset.features[:400], trained.scaler_mins,
                      trained.scaler_maxs)
    frozen = freeze_quantization(trained.model, xq)
    return trained, frozen
