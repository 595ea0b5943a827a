"""Integer-only inference kernels for the data-plane CNN.

Everything on the hot path (conv, max-pool, linear exit) runs on plain
integers: 32-bit accumulators, 64-bit intermediates for the fixed-point
requantization multiply.  No floating point touches the quantized path,
so results are bit-identical across platforms.  A real-arithmetic
reference (`float_forward`) is kept alongside as the accuracy oracle.

Quantization scheme: per-tensor, affine for activations (uint8),
symmetric for weights (int8, zero point 0).  real = scale * (q - zp).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CONV_CHANNELS = 16
CONV_KERNEL = 3
INPUT_LEN = 28


class QnnError(Exception):
    pass


class ShapeMismatch(QnnError):
    pass


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters for one tensor."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0.0):
            raise QnnError(f"scale must be > 0, got {self.scale}")

    def quantize(self, real, lo: int, hi: int):
        q = np.round(np.asarray(real, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, lo, hi).astype(np.int64)

    def dequantize(self, q):
        return self.scale * (np.asarray(q, dtype=np.float64) - self.zero_point)


@dataclass(frozen=True)
class FixedPointMultiplier:
    """A real multiplier M in (0, 1] stored as mantissa * 2^-31 * 2^-right_shift.

    mantissa is a 32-bit signed integer normalized into [2^30, 2^31).
    """

    mantissa: int
    right_shift: int

    def __post_init__(self):
        if not (1 << 30) <= self.mantissa < (1 << 31):
            raise QnnError(f"mantissa {self.mantissa} outside [2^30, 2^31)")
        if self.right_shift < 0:
            raise QnnError("right_shift must be >= 0")

    @property
    def value(self) -> float:
        return self.mantissa * 2.0 ** (-31 - self.right_shift)


def multiplier_from_real(m: float) -> FixedPointMultiplier:
    """Encode a real multiplier in (0, 1] as mantissa / right-shift form."""
    if not 0.0 < m <= 1.0:
        raise QnnError(f"requant multiplier {m} outside (0, 1]")
    frac, exp = math.frexp(m)  # m = frac * 2^exp, frac in [0.5, 1)
    mantissa = int(round(frac * (1 << 31)))
    if mantissa == (1 << 31):  # frac rounded up to 1.0
        mantissa >>= 1
        exp += 1
    # m = mantissa * 2^(exp-31)  ->  right_shift = -exp
    right_shift = -exp
    if right_shift < 0:  # m == 1.0: saturate to the largest mantissa
        mantissa = (1 << 31) - 1
        right_shift = 0
    return FixedPointMultiplier(mantissa=mantissa, right_shift=right_shift)


def _rne_shift_right(v, shift: int):
    """Round-to-nearest-even arithmetic right shift (scalar int or int64 array)."""
    if shift <= 0:
        return v
    if isinstance(v, np.ndarray):
        q = v >> shift
        r = v - (q << shift)
        half = np.int64(1) << (shift - 1)
        bump = (r > half) | ((r == half) & ((q & 1) == 1))
        return q + bump.astype(np.int64)
    q = v >> shift
    r = v - (q << shift)
    half = 1 << (shift - 1)
    if r > half or (r == half and (q & 1)):
        q += 1
    return q


def round_fixed(acc, m: FixedPointMultiplier):
    """Requantize an integer accumulator: round-to-nearest-even of acc * M.

    acc may be a Python int or an int64 ndarray.  The product
    acc * mantissa fits 64 bits for every accumulator this pipeline can
    produce (|acc| < 2^32).
    """
    if isinstance(acc, np.ndarray):
        prod = acc.astype(np.int64) * np.int64(m.mantissa)
    else:
        prod = acc * m.mantissa
    return _rne_shift_right(prod, 31 + m.right_shift)


@dataclass(frozen=True)
class QConvLayer:
    """Quantized 1D conv: 16 filters, 1 input channel, kernel 3, stride 1, zero padding."""

    weights: np.ndarray  # int8, shape (16, 3)
    bias: np.ndarray  # int32, shape (16,), scale = in.scale * w.scale, zp 0
    in_q: QuantParams  # uint8 activations
    w_q: QuantParams  # symmetric int8 weights (zero_point 0)
    out_q: QuantParams  # uint8 post-ReLU activations
    requant: FixedPointMultiplier

    def __post_init__(self):
        if self.weights.shape != (CONV_CHANNELS, CONV_KERNEL):
            raise ShapeMismatch(f"conv weights {self.weights.shape} != (16, 3)")
        if self.bias.shape != (CONV_CHANNELS,):
            raise ShapeMismatch(f"conv bias {self.bias.shape} != (16,)")
        if self.w_q.zero_point != 0:
            raise QnnError("weight quantization must be symmetric (zero_point 0)")

    def float_weights(self) -> np.ndarray:
        return self.w_q.dequantize(self.weights.astype(np.int64))

    def float_bias(self) -> np.ndarray:
        return self.bias.astype(np.float64) * (self.in_q.scale * self.w_q.scale)


@dataclass(frozen=True)
class QLinearExit:
    """Quantized single-output linear classifier over the 16 pooled channels."""

    weights: np.ndarray  # int8, shape (16,)
    bias: int  # int32, scale = in.scale * w.scale
    in_q: QuantParams  # int8 pooled maps
    w_q: QuantParams
    logit_q: QuantParams  # int8 output logit
    requant: FixedPointMultiplier

    def __post_init__(self):
        if self.weights.shape != (CONV_CHANNELS,):
            raise ShapeMismatch(f"linear weights {self.weights.shape} != (16,)")
        if self.w_q.zero_point != 0:
            raise QnnError("weight quantization must be symmetric (zero_point 0)")

    def float_weights(self) -> np.ndarray:
        return self.w_q.dequantize(self.weights.astype(np.int64))

    def float_bias(self) -> float:
        return float(self.bias) * (self.in_q.scale * self.w_q.scale)


@dataclass(frozen=True)
class QLogit:
    """A quantized binary logit in the shared logit domain."""

    q: int  # int8
    qparams: QuantParams

    @property
    def real(self) -> float:
        return self.qparams.scale * (self.q - self.qparams.zero_point)


def qconv1d_relu(x: np.ndarray, layer: QConvLayer) -> np.ndarray:
    """Integer conv + fused ReLU.  x: (28,) uint8 values; returns (16, 28) uint8.

    Zero padding contributes the input zero point, i.e. real 0.  ReLU is
    fused by clamping the requantized output below at out_q.zero_point.
    """
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (INPUT_LEN,):
        raise ShapeMismatch(f"input shape {x.shape} != (28,)")
    in_zp = layer.in_q.zero_point
    padded = np.full(INPUT_LEN + 2, in_zp, dtype=np.int64)
    padded[1:-1] = x
    # windows[p] = (x[p-1], x[p], x[p+1]) with zero-point padding at the ends
    windows = np.lib.stride_tricks.sliding_window_view(padded, CONV_KERNEL) - in_zp
    w = layer.weights.astype(np.int64)  # weight zero point is 0
    acc = windows @ w.T + layer.bias.astype(np.int64)  # (28, 16)
    out = layer.out_q.zero_point + round_fixed(acc, layer.requant)
    out = np.clip(out, layer.out_q.zero_point, 255)
    return out.T.astype(np.uint8)  # (16, 28)


def global_maxpool(maps: np.ndarray, out_q_signed: QuantParams) -> np.ndarray:
    """Per-channel max over all 28 positions, recentred into the int8 domain.

    The recentring is the fixed affine shift q_s8 = q_u8 - 128 (scale kept,
    zero point shifted by 128), matching the ring buffer and wire encoding.
    """
    maps = np.asarray(maps)
    if maps.shape != (CONV_CHANNELS, INPUT_LEN):
        raise ShapeMismatch(f"maps shape {maps.shape} != (16, 28)")
    pooled = maps.astype(np.int64).max(axis=1) - 128
    return pooled.astype(np.int8)


def qlinear_logit(pooled: np.ndarray, layer: QLinearExit) -> QLogit:
    """Integer linear exit classifier over the 16 pooled int8 values."""
    pooled = np.asarray(pooled, dtype=np.int64)
    if pooled.shape != (CONV_CHANNELS,):
        raise ShapeMismatch(f"pooled shape {pooled.shape} != (16,)")
    acc = int(np.dot(pooled - layer.in_q.zero_point, layer.weights.astype(np.int64)))
    acc += layer.bias
    q = layer.logit_q.zero_point + round_fixed(acc, layer.requant)
    q = max(-128, min(127, q))
    return QLogit(q=int(q), qparams=layer.logit_q)


@dataclass(frozen=True)
class FloatWeights:
    """Dequantized weights for the real-arithmetic reference path."""

    conv_w: np.ndarray  # (16, 3)
    conv_b: np.ndarray  # (16,)
    lin_w: np.ndarray  # (16,)
    lin_b: float


def float_weights_of(conv: QConvLayer, lin: QLinearExit) -> FloatWeights:
    return FloatWeights(
        conv_w=conv.float_weights(),
        conv_b=conv.float_bias(),
        lin_w=lin.float_weights(),
        lin_b=lin.float_bias(),
    )


def float_forward(x_real: np.ndarray, w: FloatWeights) -> tuple[float, np.ndarray]:
    """Exact real-arithmetic conv -> ReLU -> global maxpool -> linear.

    Returns (logit, pooled 16-vector).  This is the oracle the integer
    path is checked against; it shares no code with the integer kernels.
    """
    x_real = np.asarray(x_real, dtype=np.float64)
    if x_real.shape != (INPUT_LEN,):
        raise ShapeMismatch(f"input shape {x_real.shape} != (28,)")
    logits, pooled = float_forward_batch(x_real[None, :], w)
    return float(logits[0]), pooled[0]


def float_forward_batch(x_real: np.ndarray, w: FloatWeights) -> tuple[np.ndarray, np.ndarray]:
    """float_forward over a (N, 28) batch; returns (N,) logits, (N, 16) pooled."""
    x_real = np.asarray(x_real, dtype=np.float64)
    n = x_real.shape[0]
    padded = np.zeros((n, INPUT_LEN + 2))
    padded[:, 1:-1] = x_real
    windows = np.stack([padded[:, :-2], padded[:, 1:-1], padded[:, 2:]], axis=2)
    acts = np.einsum("npk,ck->ncp", windows, w.conv_w) + w.conv_b[None, :, None]
    np.maximum(acts, 0.0, out=acts)
    pooled = acts.max(axis=2)
    logits = pooled @ w.lin_w + w.lin_b
    return logits, pooled


# ---------------------------------------------------------------------------
# Calibration helpers: build integer layers from real weights and ranges.
# Shared by the hand-crafted test bundle and by tests that need random
# calibrated layers.


def quantize_weights_symmetric(w_real: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    """Per-tensor symmetric int8 weight quantization."""
    w_real = np.asarray(w_real, dtype=np.float64)
    absmax = float(np.max(np.abs(w_real)))
    if absmax == 0.0:
        absmax = 1.0
    scale = absmax / 127.0
    q = np.clip(np.round(w_real / scale), -127, 127).astype(np.int8)
    return q, QuantParams(scale=scale, zero_point=0)


def activation_qparams_unsigned(lo: float, hi: float) -> QuantParams:
    """uint8 activation parameters covering [lo, hi] with real 0 representable."""
    lo = min(lo, 0.0)
    hi = max(hi, lo + 1e-12)
    scale = (hi - lo) / 255.0
    zp = int(round(-lo / scale))
    return QuantParams(scale=scale, zero_point=max(0, min(255, zp)))


def build_conv_layer(
    w_real: np.ndarray,
    b_real: np.ndarray,
    in_q: QuantParams,
    out_q: QuantParams,
) -> QConvLayer:
    wq, w_q = quantize_weights_symmetric(w_real)
    bias_scale = in_q.scale * w_q.scale
    bias = np.round(np.asarray(b_real, dtype=np.float64) / bias_scale).astype(np.int64)
    requant = multiplier_from_real(bias_scale / out_q.scale)
    return QConvLayer(
        weights=wq.reshape(CONV_CHANNELS, CONV_KERNEL),
        bias=bias.astype(np.int32),
        in_q=in_q,
        w_q=w_q,
        out_q=out_q,
        requant=requant,
    )


def build_linear_exit(
    w_real: np.ndarray,
    b_real: float,
    in_q: QuantParams,
    logit_q: QuantParams,
) -> QLinearExit:
    wq, w_q = quantize_weights_symmetric(w_real)
    bias_scale = in_q.scale * w_q.scale
    bias = int(round(b_real / bias_scale))
    requant = multiplier_from_real(bias_scale / logit_q.scale)
    return QLinearExit(
        weights=wq.reshape(CONV_CHANNELS),
        bias=bias,
        in_q=in_q,
        w_q=w_q,
        logit_q=logit_q,
        requant=requant,
    )
