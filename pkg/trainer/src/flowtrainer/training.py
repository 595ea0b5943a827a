"""Joint two-exit training: Adam, weight decay, plateau scheduler, early
stopping, and a class-weighted BCE applied to both exits with equal
weight."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .features import quantize_row
from .model import SplitExitModel
from .synth import CONTROLLER_WINDOW, SWITCH_SNAPSHOTS, Dataset


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    plateau_patience: int = 5
    early_stop_patience: int = 10
    batch_size: int = 256
    max_epochs: int = 40
    seed: int = 0
    val_fraction: float = 0.15


@dataclass
class TrainedModel:
    model: SplitExitModel
    scaler_mins: np.ndarray
    scaler_maxs: np.ndarray
    pos_weight: float
    history: list = field(default_factory=list)
    config: TrainingConfig = field(default_factory=TrainingConfig)
    dataset_seed: int = 0


def compute_scalers(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature min/max over every training row."""
    flat = features.reshape(-1, features.shape[-1])
    return flat.min(axis=0), flat.max(axis=0)


def _epoch_loss(model, xq, labels, pos_weight, optimizer=None, batch_size=256):
    """One pass; returns mean joint loss.  Trains when an optimizer is given."""
    n = xq.shape[0]
    order = torch.arange(n) if optimizer is None else torch.randperm(n)
    total = 0.0
    weight = torch.tensor(pos_weight, dtype=torch.float32)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        xb = xq[idx]
        yb = labels[idx]
        s_logits, c_logit = model(xb, SWITCH_SNAPSHOTS, CONTROLLER_WINDOW)
        y_rep = yb.unsqueeze(1).expand_as(s_logits)
        loss_switch = F.binary_cross_entropy_with_logits(s_logits, y_rep, pos_weight=weight)
        loss_ctl = F.binary_cross_entropy_with_logits(c_logit, yb, pos_weight=weight)
        loss = loss_switch + loss_ctl  # equal weighting of the two exits
        if optimizer is not None:
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        total += float(loss.detach()) * len(idx)
    return total / n


def train(dataset: Dataset, cfg: TrainingConfig = TrainingConfig()) -> TrainedModel:
    torch.manual_seed(cfg.seed)
    mins, maxs = compute_scalers(dataset.features)
    xq_all = quantize_row(dataset.features, mins, maxs).astype(np.float32)
    xq = torch.from_numpy(xq_all)
    labels = torch.from_numpy(dataset.labels.astype(np.float32))

    n = xq.shape[0]
    n_val = max(1, int(n * cfg.val_fraction)) if n > 1 else 0
    val_idx = torch.arange(n)[:: max(1, n // max(n_val, 1))][:n_val] if n_val else torch.arange(0)
    val_mask = torch.zeros(n, dtype=torch.bool)
    val_mask[val_idx] = True
    tr_x, tr_y = xq[~val_mask], labels[~val_mask]
    va_x, va_y = xq[val_mask], labels[val_mask]

    pos_weight = dataset.class_ratio
    model = SplitExitModel(seed=cfg.seed)
    trained = TrainedModel(model=model, scaler_mins=mins, scaler_maxs=maxs,
                           pos_weight=pos_weight, config=cfg,
                           dataset_seed=dataset.seed)
    if cfg.max_epochs == 0:
        return trained

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=0.5, patience=cfg.plateau_patience
    )
    best_val = float("inf")
    best_state = None
    stale = 0
    for epoch in range(cfg.max_epochs):
        model.train()
        tr_loss = _epoch_loss(model, tr_x, tr_y, pos_weight, optimizer, cfg.batch_size)
        model.eval()
        with torch.no_grad():
            va_loss = _epoch_loss(model, va_x, va_y, pos_weight, None, cfg.batch_size) \
                if len(va_x) else tr_loss
        if not np.isfinite(tr_loss) or not np.isfinite(va_loss):
            raise RuntimeError(f"training diverged at epoch {epoch}: loss is not finite")
        scheduler.step(va_loss)
        trained.history.append({"epoch": epoch, "train": tr_loss, "val": va_loss,
                                "lr": optimizer.param_groups[0]["lr"]})
        if va_loss < best_val - 1e-5:
            best_val = va_loss
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return trained
