"""EEP4 bundle export: freeze integer parameters, derive thresholds, and
write the binary format the data plane and controller load.

The writer is implemented against the documented file layout (magic
"EEP4", version 1, tagged little-endian sections); the cross-component
test proves a written file loads and validates in the reference loader.
"""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np

from .features import FEATURE_ORDER
from .model import LOGIT_SCALE, FrozenQuant, SplitExitModel, freeze_quantization
from .training import TrainedModel

FORMAT_VERSION = 1


def integer_threshold(tau: float, scale: float = LOGIT_SCALE, zero_point: int = 0) -> int:
    logit = math.log(tau / (1.0 - tau))
    return max(-128, min(127, round(logit / scale) + zero_point))


def _qparams(scale: float, zp: int) -> bytes:
    return struct.pack("<di", scale, zp)


def _requant(mult: tuple) -> bytes:
    return struct.pack("<iB", mult[0], mult[1])


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def gru_weight_arrays(model: SplitExitModel) -> list[np.ndarray]:
    """Torch stacks GRU gates in (r, z, n) order; the bundle wants
    w_z w_r w_n, u_z u_r u_n, then the six biases in the same gate order."""
    h = model.gru.hidden_size
    w_ih = model.gru.weight_ih_l0.detach().numpy()
    w_hh = model.gru.weight_hh_l0.detach().numpy()
    b_ih = model.gru.bias_ih_l0.detach().numpy()
    b_hh = model.gru.bias_hh_l0.detach().numpy()
    w_r, w_z, w_n = w_ih[:h], w_ih[h : 2 * h], w_ih[2 * h :]
    u_r, u_z, u_n = w_hh[:h], w_hh[h : 2 * h], w_hh[2 * h :]
    b_ir, b_iz, b_in = b_ih[:h], b_ih[h : 2 * h], b_ih[2 * h :]
    b_hr, b_hz, b_hn = b_hh[:h], b_hh[h : 2 * h], b_hh[2 * h :]
    return [w_z, w_r, w_n, u_z, u_r, u_n, b_iz, b_ir, b_in, b_hz, b_hr, b_hn]


def export_bundle(trained: TrainedModel, frozen: FrozenQuant, path,
                  tau_benign: float = 0.1, tau_attack: float = 0.9) -> None:
    model = trained.model
    sections: list[tuple[bytes, bytes]] = []

    scal = b"".join(
        struct.pack("<dd", trained.scaler_mins[i], trained.scaler_maxs[i])
        for i in range(len(FEATURE_ORDER))
    )
    sections.append((b"SCAL", scal))

    conv_payload = (
        frozen.conv_w.astype("<i1").tobytes()
        + frozen.conv_b.astype("<i4").tobytes()
        + _qparams(1.0 / 127.0, 0)
        + _qparams(frozen.conv_w_scale, 0)
        + _qparams(frozen.out_scale, frozen.out_zp)
        + _requant(frozen.conv_mult)
    )
    sections.append((b"CONV", conv_payload))

    map_scale, map_zp = frozen.out_scale, frozen.out_zp - 128
    lin_payload = (
        frozen.lin_w.astype("<i1").tobytes()
        + struct.pack("<i", frozen.lin_b)
        + _qparams(map_scale, map_zp)
        + _qparams(frozen.lin_w_scale, 0)
        + _qparams(LOGIT_SCALE, 0)
        + _requant(frozen.lin_mult)
    )
    sections.append((b"LINX", lin_payload))

    sections.append((b"MAPQ", _qparams(map_scale, map_zp)))

    sections.append((b"THRS", struct.pack(
        "<ddbb", tau_benign, tau_attack,
        integer_threshold(tau_benign), integer_threshold(tau_attack),
    )))

    sections.append((b"GRUW", b"".join(_f32(m) for m in gru_weight_arrays(model))))

    head = model.head
    sections.append((b"HEAD", b"".join(_f32(m) for m in (
        head[0].weight.detach().numpy(), head[0].bias.detach().numpy(),
        head[2].weight.detach().numpy(), head[2].bias.detach().numpy(),
    ))))

    feature_hash = hashlib.sha256(",".join(FEATURE_ORDER).encode()).hexdigest()[:16]
    meta = {
        "feature_hash": feature_hash,
        "training_seed": str(trained.config.seed),
        "dataset_seed": str(trained.dataset_seed),
        "origin": "flowtrainer",
    }
    parts = [struct.pack("<H", len(meta))]
    for k in sorted(meta):
        kb, vb = k.encode(), meta[k].encode()
        parts.append(struct.pack("<H", len(kb)) + kb + struct.pack("<H", len(vb)) + vb)
    sections.append((b"META", b"".join(parts)))

    with open(path, "wb") as fh:
        fh.write(b"EEP4" + struct.pack("<B", FORMAT_VERSION))
        for tag, payload in sections:
            fh.write(tag + struct.pack("<I", len(payload)) + payload)


def train_and_export(dataset, cfg, path, tau: float = 0.9,
                     calib_flows: int = 2000) -> tuple[TrainedModel, FrozenQuant]:
    """Convenience: train, freeze on a calibration slice, export."""
    from .features import quantize_row
    from .training import train

    trained = train(dataset, cfg)
    xq = quantize_row(dataset.features[:calib_flows], trained.scaler_mins,
                      trained.scaler_maxs)
    frozen = freeze_quantization(trained.model, xq)
    export_bundle(trained, frozen, path, tau_benign=1.0 - tau, tau_attack=tau)
    return trained, frozen
