"""The EEP4 model-bundle file format shared by the switch, the controller,
and any trainer that exports one.

Binary layout, all little-endian (the wire protocol is big-endian; both
byte orders are deliberate, documented contracts):

    magic "EEP4", version u8 = 1, then tagged sections:
        tag: 4 ASCII bytes, length: u32, payload
    required: SCAL CONV LINX MAPQ THRS GRUW HEAD; optional: META

    SCAL: 28 x (min f64, max f64)
    CONV: weights 16x3 i8, bias 16 i32, in_q, w_q, out_q, requant
    LINX: weights 16 i8, bias i32, in_q, w_q, logit_q, requant
    MAPQ: one qparams (the signed-8 pooled-map domain)
    THRS: tau_benign f64, tau_attack f64, t_benign_q i8, t_attack_q i8
    GRUW: w_z w_r w_n (64x16), u_z u_r u_n (64x64),
          b_iz b_ir b_in b_hz b_hr b_hn (64), all f32
    HEAD: dense1 32x64 f32 + 32 f32, dense2 1x32 f32 + 1 f32
    META: u16 count, then (u16 len, utf8 key, u16 len, utf8 value) pairs

    qparams on disk: scale f64, zero_point i32
    requant on disk: mantissa i32, right_shift u8
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .controller import ClassifierHead, GruWeights
from .datapath import ExitThresholds, precompute_thresholds
from .flow import NUM_FEATURES, FeatureScaler
from .qnn import (
    FixedPointMultiplier,
    QConvLayer,
    QLinearExit,
    QuantParams,
    multiplier_from_real,
)

MAGIC = b"EEP4"
FORMAT_VERSION = 1
REQUIRED_TAGS = (b"SCAL", b"CONV", b"LINX", b"MAPQ", b"THRS", b"GRUW", b"HEAD")

# The shared logit domain: int8 covering [-5, +5], zero point 0.  Sigmoid
# saturates beyond 0.993 there, so wider coverage buys nothing.
LOGIT_SCALE = 10.0 / 255.0
DEFAULT_LOGIT_Q = QuantParams(scale=LOGIT_SCALE, zero_point=0)


class BundleError(Exception):
    pass


class BadMagic(BundleError):
    pass


class MissingSection(BundleError):
    pass


class SectionLengthMismatch(BundleError):
    pass


class ValidationFailed(BundleError):
    pass


@dataclass(frozen=True)
class ModelBundle:
    scaler: FeatureScaler
    conv: QConvLayer
    linear_exit: QLinearExit
    map_q: QuantParams
    thresholds: ExitThresholds
    gru: GruWeights
    head: ClassifierHead
    metadata: dict = field(default_factory=dict)


def validate_bundle(b: ModelBundle) -> None:
    """Check every cross-field invariant; raise ValidationFailed naming the
    first violation.  Construction already enforces per-type shapes."""
    if np.any(b.scaler.mins > b.scaler.maxs):
        raise ValidationFailed("scaler: min > max")
    for name, qp in (("conv.in_q", b.conv.in_q), ("conv.out_q", b.conv.out_q),
                     ("linear.logit_q", b.linear_exit.logit_q), ("map_q", b.map_q)):
        if qp.scale <= 0:
            raise ValidationFailed(f"{name}: scale <= 0")
    if not (0 <= b.conv.in_q.zero_point <= 255):
        raise ValidationFailed("conv.in_q: uint8 zero point out of range")
    if not (0 <= b.conv.out_q.zero_point <= 255):
        raise ValidationFailed("conv.out_q: uint8 zero point out of range")
    if not (-128 <= b.map_q.zero_point <= 127):
        raise ValidationFailed("map_q: int8 zero point out of range")
    if not (-128 <= b.linear_exit.logit_q.zero_point <= 127):
        raise ValidationFailed("logit_q: int8 zero point out of range")
    th = b.thresholds
    if not (0.0 < th.tau_benign <= th.tau_attack < 1.0):
        raise ValidationFailed("thresholds: need 0 < tau_benign <= tau_attack < 1")
    # The data plane never computes logarithms: the integer thresholds must
    # already agree with the tau values, within one logit quantum.
    lq = b.linear_exit.logit_q
    for tau, t_q, name in ((th.tau_benign, th.t_benign_q, "t_benign_q"),
                           (th.tau_attack, th.t_attack_q, "t_attack_q")):
        want = max(-128, min(127, round(math.log(tau / (1 - tau)) / lq.scale) + lq.zero_point))
        if abs(t_q - want) > 1:
            raise ValidationFailed(f"thresholds: {name}={t_q} drifted from derived {want}")


def _pack_qparams(qp: QuantParams) -> bytes:
    return struct.pack("<di", qp.scale, qp.zero_point)


def _unpack_qparams(buf: bytes, off: int) -> tuple[QuantParams, int]:
    scale, zp = struct.unpack_from("<di", buf, off)
    return QuantParams(scale=scale, zero_point=zp), off + 12


def _pack_requant(m: FixedPointMultiplier) -> bytes:
    return struct.pack("<iB", m.mantissa, m.right_shift)


def _unpack_requant(buf: bytes, off: int) -> tuple[FixedPointMultiplier, int]:
    mantissa, shift = struct.unpack_from("<iB", buf, off)
    return FixedPointMultiplier(mantissa=mantissa, right_shift=shift), off + 5


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _read_f32(buf: bytes, off: int, shape) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    return arr.astype(np.float32), off + 4 * count


def save_bundle(bundle: ModelBundle, path) -> None:
    validate_bundle(bundle)
    sections: list[tuple[bytes, bytes]] = []

    scal = b"".join(
        struct.pack("<dd", bundle.scaler.mins[i], bundle.scaler.maxs[i])
        for i in range(NUM_FEATURES)
    )
    sections.append((b"SCAL", scal))

    conv = bundle.conv
    conv_payload = (
        conv.weights.astype("<i1").tobytes()
        + conv.bias.astype("<i4").tobytes()
        + _pack_qparams(conv.in_q)
        + _pack_qparams(conv.w_q)
        + _pack_qparams(conv.out_q)
        + _pack_requant(conv.requant)
    )
    sections.append((b"CONV", conv_payload))

    lin = bundle.linear_exit
    lin_payload = (
        lin.weights.astype("<i1").tobytes()
        + struct.pack("<i", lin.bias)
        + _pack_qparams(lin.in_q)
        + _pack_qparams(lin.w_q)
        + _pack_qparams(lin.logit_q)
        + _pack_requant(lin.requant)
    )
    sections.append((b"LINX", lin_payload))

    sections.append((b"MAPQ", _pack_qparams(bundle.map_q)))

    th = bundle.thresholds
    sections.append(
        (b"THRS", struct.pack("<ddbb", th.tau_benign, th.tau_attack, th.t_benign_q, th.t_attack_q))
    )

    g = bundle.gru
    gruw = b"".join(
        _f32_bytes(m)
        for m in (g.w_z, g.w_r, g.w_n, g.u_z, g.u_r, g.u_n,
                  g.b_iz, g.b_ir, g.b_in, g.b_hz, g.b_hr, g.b_hn)
    )
    sections.append((b"GRUW", gruw))

    h = bundle.head
    head = b"".join(_f32_bytes(m) for m in (h.dense1_w, h.dense1_b, h.dense2_w, h.dense2_b))
    sections.append((b"HEAD", head))

    if bundle.metadata:
        parts = [struct.pack("<H", len(bundle.metadata))]
        for k in sorted(bundle.metadata):
            kb, vb = k.encode(), str(bundle.metadata[k]).encode()
            parts.append(struct.pack("<H", len(kb)) + kb + struct.pack("<H", len(vb)) + vb)
        sections.append((b"META", b"".join(parts)))

    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<B", FORMAT_VERSION))
        for tag, payload in sections:
            fh.write(tag + struct.pack("<I", len(payload)) + payload)


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 5 or data[:4] != MAGIC:
        raise BadMagic(f"not an EEP4 bundle: {data[:4]!r}")
    if data[4] != FORMAT_VERSION:
        raise BundleError(f"unsupported bundle version {data[4]}")
    off = 5
    raw: dict[bytes, bytes] = {}
    while off < len(data):
        if off + 8 > len(data):
            raise SectionLengthMismatch("trailing bytes shorter than a section header")
        tag = data[off : off + 4]
        (length,) = struct.unpack_from("<I", data, off + 4)
        off += 8
        if off + length > len(data):
            raise SectionLengthMismatch(f"section {tag!r} claims {length} bytes past EOF")
        raw[tag] = data[off : off + length]
        off += length
    for tag in REQUIRED_TAGS:
        if tag not in raw:
            raise MissingSection(tag.decode())

    scal = raw[b"SCAL"]
    if len(scal) != NUM_FEATURES * 16:
        raise SectionLengthMismatch(f"SCAL has {len(scal)} bytes, wanted {NUM_FEATURES * 16}")
    pairs = np.frombuffer(scal, dtype="<f8").reshape(NUM_FEATURES, 2)
    scaler = FeatureScaler(mins=pairs[:, 0].copy(), maxs=pairs[:, 1].copy())

    cbuf = raw[b"CONV"]
    if len(cbuf) != 48 + 64 + 3 * 12 + 5:
        raise SectionLengthMismatch(f"CONV has {len(cbuf)} bytes")
    w = np.frombuffer(cbuf, dtype="<i1", count=48).reshape(16, 3).copy()
    bias = np.frombuffer(cbuf, dtype="<i4", count=16, offset=48).copy()
    o = 48 + 64
    in_q, o = _unpack_qparams(cbuf, o)
    w_q, o = _unpack_qparams(cbuf, o)
    out_q, o = _unpack_qparams(cbuf, o)
    requant, o = _unpack_requant(cbuf, o)
    conv = QConvLayer(weights=w, bias=bias, in_q=in_q, w_q=w_q, out_q=out_q, requant=requant)

    lbuf = raw[b"LINX"]
    if len(lbuf) != 16 + 4 + 3 * 12 + 5:
        raise SectionLengthMismatch(f"LINX has {len(lbuf)} bytes")
    lw = np.frombuffer(lbuf, dtype="<i1", count=16).copy()
    (lbias,) = struct.unpack_from("<i", lbuf, 16)
    o = 20
    lin_in_q, o = _unpack_qparams(lbuf, o)
    lw_q, o = _unpack_qparams(lbuf, o)
    logit_q, o = _unpack_qparams(lbuf, o)
    lrequant, o = _unpack_requant(lbuf, o)
    linear = QLinearExit(
        weights=lw, bias=lbias, in_q=lin_in_q, w_q=lw_q, logit_q=logit_q, requant=lrequant
    )

    if len(raw[b"MAPQ"]) != 12:
        raise SectionLengthMismatch("MAPQ must be 12 bytes")
    map_q, _ = _unpack_qparams(raw[b"MAPQ"], 0)

    tbuf = raw[b"THRS"]
    if len(tbuf) != 18:
        raise SectionLengthMismatch("THRS must be 18 bytes")
    tau_b, tau_a, tbq, taq = struct.unpack("<ddbb", tbuf)
    thresholds = ExitThresholds(tau_benign=tau_b, tau_attack=tau_a, t_benign_q=tbq, t_attack_q=taq)

    gbuf = raw[b"GRUW"]
    want = (3 * 64 * 16 + 3 * 64 * 64 + 6 * 64) * 4
    if len(gbuf) != want:
        raise SectionLengthMismatch(f"GRUW has {len(gbuf)} bytes, wanted {want}")
    o = 0
    mats = []
    for shape in ((64, 16),) * 3 + ((64, 64),) * 3 + ((64,),) * 6:
        m, o = _read_f32(gbuf, o, shape)
        mats.append(m)
    gru = GruWeights(*mats)

    hbuf = raw[b"HEAD"]
    want = (32 * 64 + 32 + 32 + 1) * 4
    if len(hbuf) != want:
        raise SectionLengthMismatch(f"HEAD has {len(hbuf)} bytes, wanted {want}")
    o = 0
    d1w, o = _read_f32(hbuf, o, (32, 64))
    d1b, o = _read_f32(hbuf, o, (32,))
    d2w, o = _read_f32(hbuf, o, (1, 32))
    d2b, o = _read_f32(hbuf, o, (1,))
    head = ClassifierHead(dense1_w=d1w, dense1_b=d1b, dense2_w=d2w, dense2_b=d2b)

    metadata = {}
    if b"META" in raw:
        mbuf = raw[b"META"]
        (count,) = struct.unpack_from("<H", mbuf, 0)
        o = 2
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", mbuf, o)
            o += 2
            key = mbuf[o : o + klen].decode()
            o += klen
            (vlen,) = struct.unpack_from("<H", mbuf, o)
            o += 2
            metadata[key] = mbuf[o : o + vlen].decode()
            o += vlen

    bundle = ModelBundle(
        scaler=scaler, conv=conv, linear_exit=linear, map_q=map_q,
        thresholds=thresholds, gru=gru, head=head, metadata=metadata,
    )
    validate_bundle(bundle)
    return bundle


# ---------------------------------------------------------------------------
# Hand-crafted test bundle: a deterministic flood detector good enough to
# drive the whole pipeline without any training run.

SUPPRESS = 1e15  # scaler max that floors a feature's quantized value at 0

# Two live conv channels; the suppressing scalers zero every feature the
# kernels are not meant to see.
#   channel 0, kernel [-3, 1, -2]: max(0, fwd_pkts - 2*bwd_pkts, syn_count,
#     udp_protocol) -- the switch exit statistic; one-sided flows, SYN
#     repetition, and UDP floods raise it, balanced traffic keeps it small.
#   channel 1, kernel [0, -3, 1]: max(0, syn_count, udp_protocol) -- the
#     controller's lane; unlike channel 0 it ignores the one-sidedness
#     transient a young benign flow shows before its first ACKs land.
_KERNEL_SWITCH = (-3.0, 1.0, -2.0)
_KERNEL_MARKER = (0.0, -3.0, 1.0)
_LINEAR_GAIN = 12.0
_LINEAR_BIAS = -4.2

# GRU constants: channel 1 feeds two hidden lanes, a centered detector
# tanh(20 (x - 0.2)) and a magnitude lane tanh(10 x); update gate fixed at
# 0.5 turns the recurrence into an exponential moving average.
_GRU_ALPHA = 20.0
_GRU_CENTER = 0.2
_GRU_BETA = 10.0
_HEAD_A = 8.0
_HEAD_B = 8.0


def make_handcrafted_bundle(tau: float = 0.9) -> ModelBundle:
    """Deterministic SYN/UDP-flood detector with handmade GRU agreement."""
    mins = np.zeros(NUM_FEATURES)
    maxs = np.full(NUM_FEATURES, SUPPRESS)
    maxs[0] = 15.0  # fwd_pkt_count
    maxs[1] = 15.0  # bwd_pkt_count
    maxs[16] = 10.0  # syn_count
    mins[23], maxs[23] = 6.0, 17.0  # protocol: TCP -> 0, UDP -> 127
    scaler = FeatureScaler(mins=mins, maxs=maxs)

    in_q = QuantParams(scale=1.0 / 127.0, zero_point=0)
    out_q = QuantParams(scale=1.0 / 127.0, zero_point=128)
    map_q = QuantParams(scale=1.0 / 127.0, zero_point=0)

    w_real = np.zeros((16, 3))
    w_real[0] = _KERNEL_SWITCH
    w_real[1] = _KERNEL_MARKER
    w_scale = 3.0 / 127.0
    conv_w = np.round(w_real / w_scale).astype(np.int8)
    conv = QConvLayer(
        weights=conv_w,
        bias=np.zeros(16, dtype=np.int32),
        in_q=in_q,
        w_q=QuantParams(scale=w_scale, zero_point=0),
        out_q=out_q,
        requant=multiplier_from_real((in_q.scale * w_scale) / out_q.scale),
    )

    lin_real = np.zeros(16)
    lin_real[0] = _LINEAR_GAIN
    lw_scale = _LINEAR_GAIN / 127.0
    lin_w = np.round(lin_real / lw_scale).astype(np.int8)
    bias_scale = map_q.scale * lw_scale
    linear = QLinearExit(
        weights=lin_w,
        bias=int(round(_LINEAR_BIAS / bias_scale)),
        in_q=map_q,
        w_q=QuantParams(scale=lw_scale, zero_point=0),
        logit_q=DEFAULT_LOGIT_Q,
        requant=multiplier_from_real(bias_scale / DEFAULT_LOGIT_Q.scale),
    )

    thresholds = precompute_thresholds(1.0 - tau, tau, DEFAULT_LOGIT_Q)

    zeros_in = lambda: np.zeros((64, 16), dtype=np.float32)  # noqa: E731
    zeros_h = lambda: np.zeros((64, 64), dtype=np.float32)  # noqa: E731
    zeros_b = lambda: np.zeros(64, dtype=np.float32)  # noqa: E731
    w_n = zeros_in()
    w_n[0, 1] = _GRU_ALPHA  # lane 0 reads the marker channel
    w_n[1, 1] = _GRU_BETA
    b_in = zeros_b()
    b_in[0] = -_GRU_ALPHA * _GRU_CENTER
    gru = GruWeights(
        w_z=zeros_in(), w_r=zeros_in(), w_n=w_n,
        u_z=zeros_h(), u_r=zeros_h(), u_n=zeros_h(),
        b_iz=zeros_b(), b_ir=zeros_b(), b_in=b_in,
        b_hz=zeros_b(), b_hr=zeros_b(), b_hn=zeros_b(),
    )

    # Head reconstructs h0 and h1 through paired ReLUs, then applies
    # logit = A*h0 - B*h1 + C with C chosen so an all-zero sequence lands
    # exactly on p = 0.5 (h1 is 0 there, h0 is the EWMA of tanh(-alpha*c)).
    d1w = np.zeros((32, 64), dtype=np.float32)
    d1w[0, 0], d1w[1, 0] = 1.0, -1.0
    d1w[2, 1], d1w[3, 1] = 1.0, -1.0
    d2w = np.zeros((1, 32), dtype=np.float32)
    d2w[0, 0], d2w[0, 1] = _HEAD_A, -_HEAD_A
    d2w[0, 2], d2w[0, 3] = -_HEAD_B, _HEAD_B
    h_zero = math.tanh(-_GRU_ALPHA * _GRU_CENTER) * (1.0 - 0.5 ** 10)
    d2b = np.array([-_HEAD_A * h_zero], dtype=np.float32)
    head = ClassifierHead(
        dense1_w=d1w, dense1_b=np.zeros(32, dtype=np.float32),
        dense2_w=d2w, dense2_b=d2b,
    )

    return ModelBundle(
        scaler=scaler,
        conv=conv,
        linear_exit=linear,
        map_q=map_q,
        thresholds=thresholds,
        gru=gru,
        head=head,
        metadata={"model": "handcrafted-flood-detector", "tau": f"{tau}"},
    )


def with_thresholds(bundle: ModelBundle, tau_benign: float, tau_attack: float) -> ModelBundle:
    """Re-derive integer thresholds for new tau values (offline path)."""
    th = precompute_thresholds(tau_benign, tau_attack, bundle.linear_exit.logit_q)
    return replace(bundle, thresholds=th)
