"""The two-exit model with quantization-aware training for the switch half.

Switch branch (trained under fake quantization, deployed as integers):
    28 quantized features -> conv1d(16 filters, kernel 3, zero padding)
    -> ReLU -> global max-pool -> 1-unit linear exit.
Controller branch (full precision):
    the last 10 pooled vectors -> GRU(16 -> 64, h0 = 0) -> 32 ReLU -> 1.

Fake quantization mirrors the integer kernels' conventions exactly:
per-tensor symmetric int8 weights (zero point 0), asymmetric uint8
activations, round-to-nearest-even, fused ReLU as a clamp at the output
zero point, and a shared int8 logit domain covering [-5, 5].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LOGIT_SCALE = 10.0 / 255.0
INPUT_SCALE = 1.0 / 127.0


def ste_round(x: torch.Tensor) -> torch.Tensor:
    """Round-to-nearest-even with a straight-through gradient."""
    return x + (torch.round(x) - x).detach()


def fake_quant_weights(w: torch.Tensor) -> torch.Tensor:
    """Per-tensor symmetric int8: scale = absmax / 127, zero point 0."""
    absmax = w.detach().abs().max().clamp(min=1e-8)
    scale = absmax / 127.0
    return ste_round(w / scale).clamp(-127, 127) * scale


def fake_quant_logit(x: torch.Tensor) -> torch.Tensor:
    return ste_round(x / LOGIT_SCALE).clamp(-128, 127) * LOGIT_SCALE


class ActivationObserver(nn.Module):
    """EMA range observer for the conv output; drives the uint8 fake quant
    during training and is replaced by a percentile-calibrated scale at
    export time."""

    def __init__(self, momentum: float = 0.05):
        super().__init__()
        self.momentum = momentum
        self.register_buffer("hi", torch.tensor(1.0))
        self.frozen = False

    def observe(self, x: torch.Tensor) -> None:
        if self.frozen or not self.training:
            return
        with torch.no_grad():
            cur = x.detach().max().clamp(min=1e-6)
            self.hi.mul_(1 - self.momentum).add_(self.momentum * cur)

    @property
    def scale(self) -> float:
        return float(self.hi) / 255.0

    def set_range(self, hi: float) -> None:
        with torch.no_grad():
            self.hi.fill_(max(hi, 1e-6))
        self.frozen = True


class SplitExitModel(nn.Module):
    def __init__(self, hidden: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv = nn.Conv1d(1, 16, kernel_size=3, padding=1)
        self.exit_fc = nn.Linear(16, 1)
        # wider init on the shallow switch branch: confident early-exit
        # logits (|logit| > 2.2 at tau 0.9) are reachable in far fewer
        # optimizer steps, which matters on small CPU budgets
        nn.init.normal_(self.conv.weight, std=1.0)
        nn.init.normal_(self.exit_fc.weight, std=1.0)
        self.observer = ActivationObserver()
        self.gru = nn.GRU(input_size=16, hidden_size=hidden, batch_first=True)
        self.head = nn.Sequential(
            nn.Linear(hidden, hidden // 2), nn.ReLU(), nn.Linear(hidden // 2, 1)
        )

    # -- switch branch -----------------------------------------------------

    def conv_pool(self, xq: torch.Tensor) -> torch.Tensor:
        """xq: (..., 28) quantized features in [0, 127].  Returns pooled
        (..., 16) on the fake-quantized uint8 grid (real units)."""
        shape = xq.shape[:-1]
        x = (xq.reshape(-1, 1, xq.shape[-1])).float() * INPUT_SCALE
        w = fake_quant_weights(self.conv.weight)
        acts = F.conv1d(x, w, self.conv.bias, padding=1)
        acts = torch.relu(acts)
        self.observer.observe(acts)
        scale = self.observer.scale
        acts = ste_round(acts / scale).clamp(0, 255) * scale
        pooled = acts.amax(dim=2)
        return pooled.reshape(*shape, 16)

    def switch_logit(self, pooled: torch.Tensor) -> torch.Tensor:
        w = fake_quant_weights(self.exit_fc.weight)
        logit = F.linear(pooled, w, self.exit_fc.bias).squeeze(-1)
        return fake_quant_logit(logit)

    # -- controller branch ---------------------------------------------------

    def controller_logit(self, pooled_seq: torch.Tensor) -> torch.Tensor:
        """pooled_seq: (N, T, 16) dequantized pooled maps, oldest first."""
        _, h_n = self.gru(pooled_seq)
        return self.head(h_n[-1]).squeeze(-1)

    def forward(self, xq_seq: torch.Tensor, snapshots, window: int = 10):
        """xq_seq: (N, L, 28).  Returns (switch logits at the snapshot
        positions (N, len(snapshots)), controller logit (N,))."""
        pooled = self.conv_pool(xq_seq)  # (N, L, 16)
        s_logits = self.switch_logit(pooled[:, list(snapshots), :])
        c_logit = self.controller_logit(pooled[:, -window:, :])
        return s_logits, c_logit


@dataclass
class FrozenQuant:
    """Integer parameters frozen after training; the exact arithmetic the
    data plane will execute, simulated in float64 (all values are integers
    well inside the 2^53 exact range)."""

    conv_w: np.ndarray  # int8 (16, 3)
    conv_b: np.ndarray  # int32 (16,)
    conv_w_scale: float
    out_scale: float
    out_zp: int
    conv_mult: tuple  # (mantissa, right_shift)
    lin_w: np.ndarray  # int8 (16,)
    lin_b: int
    lin_w_scale: float
    lin_mult: tuple
    logit_scale: float = LOGIT_SCALE

    @staticmethod
    def _encode_multiplier(m: float) -> tuple:
        if not 0.0 < m <= 1.0:
            raise ValueError(f"requant multiplier {m} outside (0, 1]")
        frac, exp = math.frexp(m)
        mant = int(round(frac * (1 << 31)))
        if mant == 1 << 31:
            mant >>= 1
            exp += 1
        shift = -exp
        if shift < 0:
            mant = (1 << 31) - 1
            shift = 0
        return mant, shift

    @staticmethod
    def _rne_div_pow2(v: np.ndarray, shift: int) -> np.ndarray:
        # v holds exact integers (|v| < 2^53); division by 2^shift is exact
        # in float64, so numpy's round-half-even equals the integer RNE
        return np.round(v / float(1 << shift))

    def conv_pool_int(self, xq: np.ndarray) -> np.ndarray:
        """xq: (..., 28) uint8 grid.  Returns pooled int8 values (..., 16)."""
        x = xq.astype(np.float64)
        padded = np.zeros(x.shape[:-1] + (x.shape[-1] + 2,))
        padded[..., 1:-1] = x
        w = self.conv_w.astype(np.float64)
        acc = (
            np.einsum("...p,c->...pc", padded[..., :-2], w[:, 0])
            + np.einsum("...p,c->...pc", padded[..., 1:-1], w[:, 1])
            + np.einsum("...p,c->...pc", padded[..., 2:], w[:, 2])
            + self.conv_b.astype(np.float64)
        )
        mant, shift = self.conv_mult
        out = self._rne_div_pow2(acc * float(mant), 31 + shift) + self.out_zp
        np.clip(out, self.out_zp, 255, out=out)
        return out.max(axis=-2) - 128.0  # int8 grid, float64 carrier

    def switch_logit_int(self, pooled_s8: np.ndarray) -> np.ndarray:
        """pooled_s8: (..., 16) int8 grid.  Returns integer logit codes."""
        zp_s8 = self.out_zp - 128
        acc = (pooled_s8 - zp_s8) @ self.lin_w.astype(np.float64) + float(self.lin_b)
        mant, shift = self.lin_mult
        q = self._rne_div_pow2(acc * float(mant), 31 + shift)
        return np.clip(q, -128, 127)

    def forward_int(self, xq: np.ndarray) -> np.ndarray:
        return self.switch_logit_int(self.conv_pool_int(xq))


def freeze_quantization(model: SplitExitModel, calib_xq: np.ndarray,
                        percentile: float = 99.9) -> FrozenQuant:
    """Fix integer weights, scales, zero points, and fixed-point multipliers
    from the trained model plus a calibration batch of quantized inputs."""
    model.eval()
    with torch.no_grad():
        w = model.conv.weight.detach().squeeze(1)  # (16, 3)
        w_scale = float(w.abs().max().clamp(min=1e-8)) / 127.0
        conv_w = torch.round(w / w_scale).clamp(-127, 127).to(torch.int8).numpy()
        bias_scale = INPUT_SCALE * w_scale
        conv_b = torch.round(model.conv.bias.detach() / bias_scale).to(torch.int32).numpy()

        x = torch.from_numpy(calib_xq.reshape(-1, 1, calib_xq.shape[-1])).float() * INPUT_SCALE
        acts = torch.relu(F.conv1d(x, (torch.from_numpy(conv_w).float().unsqueeze(1)) * w_scale,
                                   torch.from_numpy(conv_b.astype(np.float64)).float() * bias_scale,
                                   padding=1))
        hi = max(float(np.percentile(acts.numpy(), percentile)), 1e-6)
        out_scale = max(hi / 255.0, bias_scale)  # keeps the multiplier in (0, 1]
        model.observer.set_range(out_scale * 255.0)

        lw = model.exit_fc.weight.detach().squeeze(0)
        lw_scale = float(lw.abs().max().clamp(min=1e-8)) / 127.0
        lin_w = torch.round(lw / lw_scale).clamp(-127, 127).to(torch.int8).numpy()
        lin_bias_scale = out_scale * lw_scale
        lin_b = int(torch.round(model.exit_fc.bias.detach() / lin_bias_scale))

    return FrozenQuant(
        conv_w=conv_w,
        conv_b=conv_b,
        conv_w_scale=w_scale,
        out_scale=out_scale,
        out_zp=0,
        conv_mult=FrozenQuant._encode_multiplier(bias_scale / out_scale),
        lin_w=lin_w,
        lin_b=lin_b,
        lin_w_scale=lw_scale,
        lin_mult=FrozenQuant._encode_multiplier(min(lin_bias_scale / LOGIT_SCALE, 1.0)),
    )
