"""Secure neural building blocks and the block graphs assembled from them.

Weights, biases, and normalization parameters are plaintext inputs known to
both parties, so convolution and batch-norm are share-local linear maps
(zero communication); the nonlinearities ride on the base protocols.
Tensors are channel-first (C, H, W) without a batch axis.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ShapeError
from .numeric import FixedPointCodec
from .protocols import _divi_core, sec_comp, select, sec_exp, to_field, to_masked_real
from .transport import PartyCtx

# CBS mode -> (kernel, stride)
CBS_MODES = {1: (1, 1), 2: (3, 1), 3: (3, 2)}

_LIMB_BITS = 21
_LIMB_MASK = np.uint64((1 << _LIMB_BITS) - 1)


@dataclass
class ConvParams:
    """Plaintext convolution parameters (weights out*in*k*k, bias per out)."""

    weights: np.ndarray  # float64 (out_ch, in_ch, k, k)
    bias: np.ndarray  # float64 (out_ch,)
    stride: int
    _enc: dict = dc_field(default_factory=dict, repr=False)

    @property
    def kernel(self) -> int:
        return self.weights.shape[-1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ShapeError(f"kernel {self.kernel} not in {{1, 3}}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride {self.stride} not in {{1, 2}}")
        if self.weights.shape[-2] != self.kernel:
            raise ShapeError("kernel window must be square")

    def encoded(self, codec: FixedPointCodec):
        """Signed integer weight matrix (out, in*k*k) and 2f-scale biases."""
        key = (codec.ring.p, codec.f)
        if key not in self._enc:
            w = np.round(self.weights * codec.scale).astype(np.int64)
            b = np.array(
                [codec.encode_int(v, 2 * codec.f) for v in self.bias], dtype=np.uint64
            )
            self._enc[key] = (w.reshape(self.out_channels, -1), b)
        return self._enc[key]


@dataclass
class BNParams:
    """Per-channel normalization: y = gamma * (x - mu) / sqrt(var + eps) + beta."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        if np.any(self.var + self.eps <= 0):
            raise ValueError("variance + eps must be positive")

    def scale_shift(self):
        a = self.gamma / np.sqrt(self.var + self.eps)
        return a, self.beta


# -- modular matmul with plaintext integer weights ------------------------------


def mod_matmul(w_signed: np.ndarray, x: np.ndarray, codec: FixedPointCodec) -> np.ndarray:
    """(w @ x) mod p for signed int64 weights and uint64 field columns.

    Field elements are split into 21-bit limbs so each partial product sum
    stays inside int64; the three reduced limb sums are recombined mod p.
    """
    ring = codec.ring
    reduction = w_signed.shape[1]
    max_w = int(np.abs(w_signed).max()) if w_signed.size else 0
    if reduction * max_w >= 1 << 41:  # limb sum must stay below 2^62
        raise ShapeError("weight magnitude times reduction length too large")
    limbs = []
    shifted = x
    for _ in range(3):
        limbs.append((shifted & _LIMB_MASK).astype(np.int64))
        shifted = shifted >> np.uint64(_LIMB_BITS)
    acc = None
    for i, limb in enumerate(limbs):
        s = w_signed @ limb  # |s| < 2^62, fits int64
        part = (s % np.int64(ring.p)).astype(np.uint64)
        if i:
            part = ring.mul(part, np.uint64((1 << (_LIMB_BITS * i)) % ring.p))
        acc = part if acc is None else ring.add(acc, part)
    return acc


def _pad_spatial(x: np.ndarray, pad: int, value) -> np.ndarray:
    if pad == 0:
        return x
    c, h, w = x.shape
    out = np.full((c, h + 2 * pad, w + 2 * pad), value, dtype=x.dtype)
    out[:, pad : pad + h, pad : pad + w] = x
    return out


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, pad_value) -> tuple:
    """(C*k*k, OH*OW) patch matrix plus the output spatial shape."""
    x = _pad_spatial(x, pad, pad_value)
    c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    cols = np.empty((c * k * k, oh * ow), dtype=x.dtype)
    idx = 0
    for ci in range(c):
        for di in range(k):
            for dj in range(k):
                patch = x[ci, di : di + stride * oh : stride, dj : dj + stride * ow : stride]
                cols[idx] = patch.reshape(-1)
                idx += 1
    return cols, (oh, ow)


def conv_field(x: np.ndarray, params: ConvParams, codec: FixedPointCodec,
               add_bias: bool) -> np.ndarray:
    """One side of the convolution on field data, result at scale 2^(2f)."""
    if x.ndim != 3 or x.shape[0] != params.in_channels:
        raise ShapeError(
            f"input {x.shape} incompatible with conv expecting "
            f"{params.in_channels} channels"
        )
    w, b = params.encoded(codec)
    cols, (oh, ow) = _im2col(x, params.kernel, params.stride, params.kernel // 2, np.uint64(0))
    out = mod_matmul(w, cols, codec)
    if add_bias:
        out = codec.ring.add(out, b[:, None])
    return out.reshape(params.out_channels, oh, ow)


def conv_output_shape(in_shape, params: ConvParams):
    c, h, w = in_shape
    k, s, p = params.kernel, params.stride, params.kernel // 2
    return (params.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


# -- secure layers ----------------------------------------------------------------


def sec_conv(ctx: PartyCtx, x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Share-local convolution with plaintext weights; zero rounds.

    Each party convolves its share; party 1 adds the bias.  The accumulated
    scale-2^(2f) outputs are truncated locally, costing at most 1 ulp per
    output element.
    """
    with ctx.begin("conv"):
        out = conv_field(x, params, ctx.codec, add_bias=ctx.party_id == 1)
        return ctx.codec.trunc_share(ctx.rerandomize(out), ctx.party_id)


def sec_bn(ctx: PartyCtx, x: np.ndarray, params: BNParams) -> np.ndarray:
    """Share-local normalization; exchanges zero messages.

    Each party centers its share by half the mean encoding, scales by the
    encoded multiplier, truncates locally, and adds half the shift.
    """
    with ctx.begin("bn"):
        codec = ctx.codec
        ring = ctx.ring
        a, shift = params.scale_shift()
        a_enc = codec.encode(a)  # (C,)
        mu_enc = codec.encode(params.mean)
        half = mu_enc >> np.uint64(1)
        mu_half = half if ctx.party_id == 2 else ring.sub(mu_enc, half)
        centered = ring.sub(x, mu_half[:, None, None])
        scaled = ring.mul(centered, a_enc[:, None, None])
        y = codec.trunc_share(ctx.rerandomize(scaled), ctx.party_id)
        beta_enc = codec.encode(shift)
        bhalf = beta_enc >> np.uint64(1)
        my_beta = bhalf if ctx.party_id == 2 else ring.sub(beta_enc, bhalf)
        return ring.add(y, my_beta[:, None, None])


def sec_silu(ctx: PartyCtx, x: np.ndarray) -> np.ndarray:
    """x / (1 + e^(-x)) on shares; |x| <= 16 semantically (saturation)."""
    with ctx.begin("silu"):
        neg = ctx.ring.neg(x)
        u = to_masked_real(ctx, neg)  # real shares of -x
        e = sec_exp(ctx, u, field_input=False)
        den = e + (1.0 if ctx.party_id == 1 else 0.0)
        y = _divi_core(ctx, -u, den)
        return to_field(ctx, y)


def sec_sigmoid(ctx: PartyCtx, x: np.ndarray) -> np.ndarray:
    """1 / (1 + e^(-x)) on shares: the unit-numerator division short-cut."""
    with ctx.begin("sigmoid"):
        neg = ctx.ring.neg(x)
        u = to_masked_real(ctx, neg)
        e = sec_exp(ctx, u, field_input=False)
        den = e + (1.0 if ctx.party_id == 1 else 0.0)
        y = _divi_core(ctx, None, den, num_is_one=True)
        return to_field(ctx, y)


def _pool_windows(x: np.ndarray, window: int, stride: int, pad_value):
    """Stack window elements: (window^2, C, OH, OW)."""
    pad = (window - 1) // 2 if stride == 1 else 0
    x = _pad_spatial(x, pad, pad_value)
    c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"window {window} exceeds spatial dims {h}x{w}")
    stack = np.empty((window * window, c, oh, ow), dtype=x.dtype)
    idx = 0
    for di in range(window):
        for dj in range(window):
            stack[idx] = x[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride]
            idx += 1
    return stack


def sec_maxpool(ctx: PartyCtx, x: np.ndarray, window: int = 2, stride: int | None = None) -> np.ndarray:
    """Running secure max over each pooling window.

    window^2 - 1 sequential steps of compare-and-select, batched across all
    windows and channels; ties keep the incumbent, so the earliest index
    wins.  Stride defaults to the window (downsampling); stride 1 pools in
    place with most-negative padding acting as -inf.
    """
    stride = window if stride is None else stride
    pad_value = ctx.codec.encode(-float((1 << ctx.codec.l) - 1)) if ctx.party_id == 1 else np.uint64(0)
    with ctx.begin("maxpool"):
        stack = _pool_windows(x, window, stride, pad_value)
        best = stack[0]
        for j in range(1, window * window):
            xj = stack[j]
            f = sec_comp(ctx, best, xj)  # 1 where incumbent < candidate
            best = select(ctx, f, xj, best)
        return best


# -- block graphs -------------------------------------------------------------------


@dataclass
class Op:
    kind: str  # conv | bn | silu | sigmoid | maxpool
    params: object = None


@dataclass
class Seq:
    items: list


@dataclass
class Concat:
    branches: list


BlockGraph = object  # Op | Seq | Concat


def graph_output_shape(node, in_shape):
    if isinstance(node, Seq):
        for item in node.items:
            in_shape = graph_output_shape(item, in_shape)
        return in_shape
    if isinstance(node, Concat):
        shapes = [graph_output_shape(b, in_shape) for b in node.branches]
        spatial = {s[1:] for s in shapes}
        if len(spatial) != 1:
            raise ShapeError(f"concat branches disagree on spatial dims: {shapes}")
        return (sum(s[0] for s in shapes),) + shapes[0][1:]
    if node.kind == "conv":
        return conv_output_shape(in_shape, node.params)
    if node.kind == "maxpool":
        window, stride = node.params
        c, h, w = in_shape
        if stride == 1:
            return in_shape
        return (c, (h - window) // stride + 1, (w - window) // stride + 1)
    return in_shape  # bn / silu / sigmoid keep shape


def run_graph_secure(ctx: PartyCtx, node, x: np.ndarray) -> np.ndarray:
    if isinstance(node, Seq):
        for item in node.items:
            x = run_graph_secure(ctx, item, x)
        return x
    if isinstance(node, Concat):
        outs = [run_graph_secure(ctx, b, x) for b in node.branches]
        return np.concatenate(outs, axis=0)
    if node.kind == "conv":
        return sec_conv(ctx, x, node.params)
    if node.kind == "bn":
        return sec_bn(ctx, x, node.params)
    if node.kind == "silu":
        return sec_silu(ctx, x)
    if node.kind == "sigmoid":
        return sec_sigmoid(ctx, x)
    if node.kind == "maxpool":
        window, stride = node.params
        return sec_maxpool(ctx, x, window, stride)
    raise ShapeError(f"unknown op {node.kind!r}")


def graph_needs(node, in_shape) -> dict:
    """Dealer randomness required to run a graph once at the given shape."""
    from .dealer import merge_specs

    if isinstance(node, Seq):
        out: dict = {}
        for item in node.items:
            out = merge_specs(out, graph_needs(item, in_shape))
            in_shape = graph_output_shape(item, in_shape)
        return out
    if isinstance(node, Concat):
        out = {}
        for b in node.branches:
            out = merge_specs(out, graph_needs(b, in_shape))
        return out
    n = int(np.prod(graph_output_shape(node, in_shape)))
    if node.kind == "silu":
        return {"real_masks": n, "exp_triples": n, "div_masks": n, "real_triples": 2 * n}
    if node.kind == "sigmoid":
        return {"real_masks": n, "exp_triples": n, "div_masks": n, "real_triples": n}
    if node.kind == "maxpool":
        window, _ = node.params
        steps = window * window - 1
        return {"comp_masks": steps * n, "triples": steps * n}
    return {}


def needs_silu(n: int) -> dict:
    return {"real_masks": n, "exp_triples": n, "div_masks": n, "real_triples": 2 * n}


def needs_sigmoid(n: int) -> dict:
    return {"real_masks": n, "exp_triples": n, "div_masks": n, "real_triples": n}


# -- builders ------------------------------------------------------------------------


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, k: int, stride: int) -> ConvParams:
    fan_in = in_ch * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k))
    w = np.clip(w, -4.0, 4.0)
    b = rng.uniform(-0.1, 0.1, out_ch)
    return ConvParams(weights=w, bias=b, stride=stride)


def init_bn(rng: np.random.Generator, ch: int) -> BNParams:
    return BNParams(
        mean=rng.normal(0.0, 0.2, ch),
        var=rng.uniform(0.5, 1.5, ch),
        gamma=rng.uniform(0.8, 1.2, ch),
        beta=rng.normal(0.0, 0.1, ch),
    )


def build_cbs(mode: int, in_ch: int, out_ch: int, rng: np.random.Generator) -> Seq:
    """Conv -> BN -> SiLU at one of the three kernel/stride modes."""
    if mode not in CBS_MODES:
        raise ShapeError(f"CBS mode {mode} unknown")
    k, s = CBS_MODES[mode]
    return Seq(
        [
            Op("conv", init_conv(rng, in_ch, out_ch, k, s)),
            Op("bn", init_bn(rng, out_ch)),
            Op("silu"),
        ]
    )


def build_eelan(in_ch: int, branch_ch: int, rng: np.random.Generator) -> Concat:
    """Three lines concatenated on channels: 1, 1+2, and 1+4 CBS blocks."""
    line1 = Seq([build_cbs(1, in_ch, branch_ch, rng)])
    line2 = Seq(
        [build_cbs(1, in_ch, branch_ch, rng)]
        + [build_cbs(2, branch_ch, branch_ch, rng) for _ in range(2)]
    )
    line3 = Seq(
        [build_cbs(1, in_ch, branch_ch, rng)]
        + [build_cbs(2, branch_ch, branch_ch, rng) for _ in range(4)]
    )
    return Concat([line1, line2, line3])


def build_sppcspc(in_ch: int, branch_ch: int, rng: np.random.Generator,
                  pools=(5, 9, 13)) -> Concat:
    """conv/pool/conv lines at three pooling scales, channel-concatenated."""
    lines = []
    for k in pools:
        lines.append(
            Seq(
                [
                    build_cbs(1, in_ch, branch_ch, rng),
                    Op("maxpool", (k, 1)),
                    build_cbs(1, branch_ch, branch_ch, rng),
                ]
            )
        )
    return Concat(lines)


# -- weights file ----------------------------------------------------------------------

_WMAGIC = b"SDWT"
_KIND_TAGS = {"conv": 0, "bn": 1, "silu": 2, "sigmoid": 3, "maxpool": 4}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_SEQ_TAG, _CONCAT_TAG = 250, 251


def _write_node(buf, node, codec):
    if isinstance(node, Seq):
        buf.write(struct.pack("<BI", _SEQ_TAG, len(node.items)))
        for item in node.items:
            _write_node(buf, item, codec)
        return
    if isinstance(node, Concat):
        buf.write(struct.pack("<BI", _CONCAT_TAG, len(node.branches)))
        for b in node.branches:
            _write_node(buf, b, codec)
        return
    buf.write(struct.pack("<B", _KIND_TAGS[node.kind]))
    if node.kind == "conv":
        p: ConvParams = node.params
        buf.write(struct.pack("<IIIII", p.out_channels, p.in_channels, p.kernel, p.kernel, p.stride))
        w = np.round(p.weights * codec.scale).astype("<i8")
        b = np.round(p.bias * codec.scale).astype("<i8")
        buf.write(w.tobytes())
        buf.write(b.tobytes())
    elif node.kind == "bn":
        p: BNParams = node.params
        buf.write(struct.pack("<Id", p.mean.size, p.eps))
        for arr in (p.mean, p.var, p.gamma, p.beta):
            buf.write(np.round(np.asarray(arr) * codec.scale).astype("<i8").tobytes())
    elif node.kind == "maxpool":
        window, stride = node.params
        buf.write(struct.pack("<II", window, stride))


def _count_layers(node) -> int:
    if isinstance(node, Seq):
        return sum(_count_layers(i) for i in node.items)
    if isinstance(node, Concat):
        return sum(_count_layers(b) for b in node.branches)
    return 1


def save_graph(node, codec: FixedPointCodec, path) -> None:
    """Graph + fixed-point-encoded parameters; same file feeds the oracle."""
    buf = io.BytesIO()
    buf.write(_WMAGIC)
    buf.write(struct.pack("<IQII", _count_layers(node), codec.ring.p, codec.f, codec.l))
    _write_node(buf, node, codec)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_node(fh, codec):
    (tag,) = struct.unpack("<B", fh.read(1))
    if tag == _SEQ_TAG:
        (n,) = struct.unpack("<I", fh.read(4))
        return Seq([_read_node(fh, codec) for _ in range(n)])
    if tag == _CONCAT_TAG:
        (n,) = struct.unpack("<I", fh.read(4))
        return Concat([_read_node(fh, codec) for _ in range(n)])
    kind = _TAG_KINDS[tag]
    if kind == "conv":
        oc, ic, kh, kw, stride = struct.unpack("<IIIII", fh.read(20))
        w = np.frombuffer(fh.read(oc * ic * kh * kw * 8), dtype="<i8").reshape(oc, ic, kh, kw)
        b = np.frombuffer(fh.read(oc * 8), dtype="<i8")
        return Op(
            "conv",
            ConvParams(
                weights=w.astype(np.float64) / codec.scale,
                bias=b.astype(np.float64) / codec.scale,
                stride=stride,
            ),
        )
    if kind == "bn":
        n, eps = struct.unpack("<Id", fh.read(12))
        arrs = [
            np.frombuffer(fh.read(n * 8), dtype="<i8").astype(np.float64) / codec.scale
            for _ in range(4)
        ]
        return Op("bn", BNParams(mean=arrs[0], var=arrs[1], gamma=arrs[2], beta=arrs[3], eps=eps))
    if kind == "maxpool":
        window, stride = struct.unpack("<II", fh.read(8))
        return Op("maxpool", (window, stride))
    return Op(kind)


def load_graph(path, codec: FixedPointCodec):
    with open(path, "rb") as fh:
        if fh.read(4) != _WMAGIC:
            raise ShapeError(f"{path}: not a weights file")
        _count, p, f, l = struct.unpack("<IQII", fh.read(20))
        if (p, f, l) != (codec.ring.p, codec.f, codec.l):
            raise ShapeError("weights file codec parameters differ from pipeline codec")
        return _read_node(fh, codec)
