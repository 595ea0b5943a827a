"""Exit-point evaluation: per-head precision/recall/F1 over a test split
plus the switch/controller exit split for a sweep of confidence
thresholds (tau = tau_attack = 1 - tau_benign).

Head quality is threshold-independent (each head scored over the whole
split at its 0.5 operating point, the usual early-exit convention); the
ratios carry the threshold trade-off.  The CSV schema matches the
reference pipeline's sweep output column for column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .features import quantize_row
from .model import FrozenQuant
from .synth import CONTROLLER_WINDOW, Dataset
from .training import TrainedModel
from .export import integer_threshold

DEFAULT_TAUS = (0.5, 0.7, 0.9, 0.95, 0.99)

CSV_HEADER = (
    "tau,switch_exit_ratio,controller_exit_ratio,"
    "switch_precision,switch_recall,switch_f1,"
    "controller_precision,controller_recall,controller_f1"
)


@dataclass
class HeadMetrics:
    precision: float
    recall: float
    f1: float


def _metrics(predicted: np.ndarray, actual: np.ndarray) -> HeadMetrics:
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return HeadMetrics(precision, recall, f1)


@dataclass
class ExitReport:
    taus: list
    switch_exit_ratio: list
    switch: HeadMetrics
    controller: HeadMetrics

    def rows(self):
        for tau, ratio in zip(self.taus, self.switch_exit_ratio):
            yield (
                f"{tau},{ratio:.4f},{1 - ratio:.4f},"
                f"{self.switch.precision:.4f},{self.switch.recall:.4f},{self.switch.f1:.4f},"
                f"{self.controller.precision:.4f},{self.controller.recall:.4f},{self.controller.f1:.4f}"
            )


def evaluate_exits(trained: TrainedModel, frozen: FrozenQuant, dataset: Dataset,
                   indices: np.ndarray, taus=DEFAULT_TAUS) -> ExitReport:
    """Score the frozen integer switch head and the float controller head
    on the selected flows; measure exit ratios for each threshold."""
    xq = quantize_row(dataset.features[indices], trained.scaler_mins, trained.scaler_maxs)
    labels = dataset.labels[indices].astype(bool)

    pooled_s8 = frozen.conv_pool_int(xq)  # (n, FLOW_LEN, 16)
    logit_codes = frozen.switch_logit_int(pooled_s8[:, -1, :])  # decision at the last packet
    switch_pred = logit_codes > 0

    pooled_real = (pooled_s8 + 128.0) * frozen.out_scale
    seq = torch.from_numpy(pooled_real[:, -CONTROLLER_WINDOW:, :]).float()
    trained.model.eval()
    with torch.no_grad():
        c_logits = trained.model.controller_logit(seq).numpy()
    controller_pred = c_logits > 0

    ratios = []
    n = len(labels)
    for tau in taus:
        t_attack = integer_threshold(tau)
        t_benign = integer_threshold(1.0 - tau) if tau < 1.0 else -t_attack
        exits = np.sum((logit_codes < t_benign) | (logit_codes > t_attack))
        ratios.append(float(exits) / n if n else 0.0)

    return ExitReport(
        taus=list(taus),
        switch_exit_ratio=ratios,
        switch=_metrics(switch_pred, labels),
        controller=_metrics(controller_pred, labels),
    )


def write_report_csv(report: ExitReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in report.rows():
            fh.write(row + "\n")
