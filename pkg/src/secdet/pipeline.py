"""End-to-end driver: image splitting, desk-scale network, plaintext and
secure inference, benchmarking.

The desk-scale topology keeps every secure block in play at small channel
widths: two downsampling conv blocks, a three-line aggregation block, a 2x2
max-pool, the three-scale pooled pyramid, and a channel-reducing conv feed
the box-prediction head.  Correctness is defined as secure-vs-oracle
agreement on identical seeded inputs, never as task accuracy.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import dealer as dealer_mod
from . import oracle
from .detect import (
    AnchorConfig,
    BoxSet,
    needs_bbpred,
    needs_nms,
    sec_bbpred,
    sec_ds,
    sec_nms,
)
from .errors import ConfigError
from .layers import (
    Op,
    Seq,
    build_cbs,
    build_eelan,
    build_sppcspc,
    graph_needs,
    graph_output_shape,
    init_bn,
    init_conv,
    load_graph,
    needs_silu,
    needs_sigmoid,
    run_graph_secure,
    save_graph,
)
from .numeric import FixedPointCodec, default_codec
from .protocols import needs_comp, needs_divi, needs_exp, reconstruct, sec_comp, sec_divi, sec_exp
from .sharing import shamir_reconstruct, shamir_share, mul_grr
from .transport import account, run_two_party

FRAME = 64  # desk-scale image side; box coordinates live in [0, FRAME]

DEFAULT_ANCHOR_CENTERS = np.array(
    [
        [4.0, 4.0, 14.0, 14.0],
        [18.0, 18.0, 42.0, 42.0],
        [36.0, 8.0, 60.0, 56.0],
    ]
)


@dataclass
class PipelineConfig:
    modulus: int = (1 << 61) - 1
    frac_bits: int = 15
    int_bits: int = 20
    engine: str = "beaver"  # beaver | grr3
    transport: str = "inproc"  # inproc | tcp
    seed: int = 0
    eta: float = 0.5
    mask_bound: float = 64.0
    num_classes: int = 3
    base_channels: int = 4
    anchor_count: int = 3
    anchor_iters: int = 1
    weights_path: str | None = None

    def codec(self) -> FixedPointCodec:
        return default_codec(p=self.modulus, f=self.frac_bits, l=self.int_bits)

    def anchors(self) -> AnchorConfig:
        centers = DEFAULT_ANCHOR_CENTERS[: self.anchor_count]
        if len(centers) < self.anchor_count:
            raise ConfigError("anchor_count exceeds the built-in center table")
        return AnchorConfig(self.anchor_count, self.anchor_iters, centers)

    def validate(self) -> None:
        if self.engine not in ("beaver", "grr3"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if self.weights_path and not Path(self.weights_path).exists():
            raise ConfigError(f"weights file missing: {self.weights_path}")
        self.codec()  # raises if the numeric invariants fail


def load_config(path=None, **overrides) -> PipelineConfig:
    data = {}
    if path:
        data = json.loads(Path(path).read_text())
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = PipelineConfig(**data)
    cfg.validate()
    return cfg


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2))


# -- desk-scale network -----------------------------------------------------------


def build_desk_network(rng: np.random.Generator, cfg: PipelineConfig):
    """Backbone graph plus the center-classification head."""
    b = cfg.base_channels
    backbone = Seq(
        [
            build_cbs(3, 1, b, rng),  # 64 -> 32
            build_cbs(3, b, 2 * b, rng),  # 32 -> 16
            build_eelan(2 * b, b, rng),  # 3 lines of b channels
            Op("maxpool", (2, 2)),  # 16 -> 8
            build_sppcspc(3 * b, b, rng),
            build_cbs(1, 3 * b, 4, rng),  # candidate channels
        ]
    )
    head_conv = init_conv(rng, 4, 1 + cfg.num_classes, 1, 1)
    head_bn = init_bn(rng, 1 + cfg.num_classes)
    return backbone, (head_conv, head_bn)


def make_weights(seed: int, cfg: PipelineConfig, path) -> None:
    """Seeded random initialization saved as one graph file (no training)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    backbone, (hc, hb) = build_desk_network(rng, cfg)
    bundle = Seq([backbone, Op("conv", hc), Op("bn", hb)])
    save_graph(bundle, cfg.codec(), path)


def load_weights(path, codec):
    bundle = load_graph(path, codec)
    backbone = bundle.items[0]
    head = (bundle.items[1].params, bundle.items[2].params)
    return backbone, head


# -- image handling ----------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """8-bit grayscale (H, W) or RGB (3, H, W) pixel array."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("L")
    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 3:
        return arr.transpose(2, 0, 1)
    return arr


def save_pgm(arr: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PPM")


def split_image(img: np.ndarray, rng: np.random.Generator, codec: FixedPointCodec):
    """Pixel-level share images plus field sharings of the normalized pixels.

    The exported shares live mod 256 (share1 uniform over [0, 255]); the
    compute path re-encodes pixel/255 into the field and splits additively.
    """
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ConfigError("expected 8-bit pixels")
    share1 = rng.integers(0, 256, img.shape, dtype=np.int64).astype(np.uint8)
    share2 = (img.astype(np.int64) - share1.astype(np.int64)) % 256
    share2 = share2.astype(np.uint8)

    chans = img[None, ...] if img.ndim == 2 else img
    enc = codec.encode(chans.astype(np.float64) / 255.0)
    t1 = codec.ring.rand(rng, enc.shape)
    t2 = codec.ring.sub(enc, t1)
    return share1, share2, (t1, t2)


def reconstruct_share_images(share1: np.ndarray, share2: np.ndarray) -> np.ndarray:
    return ((share1.astype(np.int64) + share2.astype(np.int64)) % 256).astype(np.uint8)


# -- detection results ----------------------------------------------------------------


@dataclass
class DetectionResult:
    box: list  # [x1, y1, x2, y2] clamped to the frame
    class_label: int
    confidence: float

    def as_dict(self) -> dict:
        return asdict(self)


def _assemble_detections(boxes, scores, class_probs, kept) -> list:
    out = []
    for i in kept:
        box = np.clip(np.asarray(boxes[i], dtype=np.float64), 0.0, float(FRAME))
        conf = float(np.clip(scores[i], 0.0, 1.0))
        label = int(np.argmax(class_probs[i]))
        out.append(DetectionResult(box=box.tolist(), class_label=label, confidence=conf))
    return out


# -- plaintext oracle inference ----------------------------------------------------------


def oracle_infer(img: np.ndarray, backbone, head, cfg: PipelineConfig):
    """Deterministic fixed-point forward pass through the identical graph."""
    codec = cfg.codec()
    chans = img[None, ...] if img.ndim == 2 else img
    x_enc = codec.encode(chans.astype(np.float64) / 255.0)
    feats = oracle.run_graph_fp(backbone, x_enc, codec)
    anchors = cfg.anchors()
    boxes, scores, cls = oracle.bbpred_fp(
        feats, anchors.initial_centers, anchors.iters, head, codec, frame=float(FRAME)
    )
    kept = oracle.nms_greedy(boxes, scores, cfg.eta)
    detections = _assemble_detections(boxes, scores, cls, kept)
    stages = {
        "features": codec.decode(feats),
        "boxes": boxes,
        "scores": scores,
        "class_probs": cls,
        "kept": kept,
    }
    return detections, stages


# -- secure inference -----------------------------------------------------------------------


def _infer_needs(cfg: PipelineConfig, backbone) -> dict:
    spec = graph_needs(backbone, (1, FRAME, FRAME))
    grid = graph_output_shape(backbone, (1, FRAME, FRAME))[1]
    spec = dealer_mod.merge_specs(
        spec,
        needs_bbpred(grid, cfg.anchor_count, cfg.anchor_iters, cfg.num_classes),
        needs_nms(cfg.anchor_count),
    )
    return dealer_mod.scale_spec(spec, 1.05, slack=16)


def secure_infer(img: np.ndarray, backbone, head, cfg: PipelineConfig,
                 bundles=None, collect_share_dump: bool = False):
    """Two-party inference; returns (detections, transcript, error report).

    The error report scores each stage against the plaintext oracle run on
    the same inputs; any protocol failure surfaces with stage attribution
    through the harness.
    """
    cfg.validate()
    codec = cfg.codec()
    if cfg.engine == "grr3":
        return _infer_grr3(img, backbone, head, cfg)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    _, _, (t1, t2) = split_image(img, rng, codec)
    if bundles is None:
        bundles = dealer_mod.generate(cfg.seed, _infer_needs(cfg, backbone), codec)

    anchors = cfg.anchors()
    centers_enc = codec.encode(anchors.initial_centers)

    def program(ctx, x):
        feats = run_graph_secure(ctx, backbone, x)
        feats_rec = reconstruct(ctx, feats)
        my_centers = centers_enc if ctx.party_id == 1 else np.zeros_like(centers_enc)
        acfg = AnchorConfig(anchors.cluster_count, anchors.iters, my_centers)
        bs = sec_bbpred(ctx, feats, acfg, head)
        kept, subset = sec_nms(ctx, bs, cfg.eta)
        boxes_rec = reconstruct(ctx, bs.boxes)
        scores_rec = reconstruct(ctx, bs.scores)
        cls_rec = reconstruct(ctx, bs.class_probs)
        dump = feats if collect_share_dump else None
        return kept, boxes_rec, scores_rec, cls_rec, feats_rec, dump

    out1, _, transcript = run_two_party(
        program, (t1, t2), bundles, codec, transport=cfg.transport
    )
    kept, boxes_rec, scores_rec, cls_rec, feats_rec, dump = out1
    boxes = codec.decode(boxes_rec)
    scores = codec.decode(scores_rec)
    cls = codec.decode(cls_rec)
    detections = _assemble_detections(boxes, scores, cls, kept)

    _, oracle_stages = oracle_infer(img, backbone, head, cfg)
    report = {
        "feature_extraction": float(
            np.abs(codec.decode(feats_rec) - oracle_stages["features"]).max()
        ),
        "bbox_prediction": float(np.abs(boxes - oracle_stages["boxes"]).max()),
        "classification": float(
            max(
                np.abs(scores - oracle_stages["scores"]).max(),
                np.abs(cls - oracle_stages["class_probs"]).max(),
            )
        ),
        "kept_set_equal": list(kept) == list(oracle_stages["kept"]),
    }
    extra = {"share_dump": dump, "oracle": oracle_stages, "boxes": boxes, "scores": scores}
    return detections, transcript, report, extra


def _infer_grr3(img: np.ndarray, backbone, head, cfg: PipelineConfig):
    """Simulated three-party Shamir evaluation for engine cross-validation.

    Linear layers act share-wise (Shamir sharing is linear); explicit
    products go through degree reduction; truncation and the nonlinear
    stages pass through a trusted in-memory gateway that reconstructs,
    applies the plaintext mirror, and re-shares.  This path validates the
    multi-party algebra inside the full graph; it is a simulation, not a
    networked deployment, so it produces no transcript.
    """
    from .layers import Concat, conv_field
    from .sharing import ShamirPolynomialShare

    codec = cfg.codec()
    ring = codec.ring
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    chans = img[None, ...] if img.ndim == 2 else img
    x_enc = codec.encode(chans.astype(np.float64) / 255.0)

    def reshare(values):
        return shamir_share(values, t=1, n=3, ring=ring, rng=rng)

    def gateway(shares, fn):
        return reshare(fn(shamir_reconstruct(shares, ring)))

    def walk(node, shares):
        if isinstance(node, Seq):
            for item in node.items:
                shares = walk(item, shares)
            return shares
        if isinstance(node, Concat):
            parts = [walk(b, shares) for b in node.branches]
            return [
                ShamirPolynomialShare(
                    parts[0][idx].index,
                    np.concatenate([p[idx].value for p in parts], axis=0),
                    1,
                )
                for idx in range(3)
            ]
        if node.kind == "conv":
            # the convolution is linear, so it maps each polynomial share;
            # adding the bias to every evaluation adds a constant polynomial
            convd = [
                ShamirPolynomialShare(
                    s.index, conv_field(s.value, node.params, codec, add_bias=True), 1
                )
                for s in shares
            ]
            return gateway(convd, codec.trunc_exact)
        if node.kind == "bn":
            return gateway(shares, lambda v: oracle.bn_fp(v, node.params, codec))
        if node.kind == "silu":
            return gateway(shares, lambda v: oracle.silu_fp(v, codec))
        if node.kind == "sigmoid":
            return gateway(shares, lambda v: oracle.sigmoid_fp(v, codec))
        if node.kind == "maxpool":
            w, s = node.params
            return gateway(shares, lambda v: oracle.maxpool_fp(v, w, s, codec))
        raise ConfigError(f"unknown node {node.kind!r}")

    shares = reshare(x_enc)
    feat_shares = walk(backbone, shares)
    feats = shamir_reconstruct(feat_shares, ring)

    # cross-validate one batch of degree-reduction products on the features
    flat = feats.reshape(-1)
    xs = reshare(flat)
    ys = reshare(flat[::-1].copy())
    prod = shamir_reconstruct(mul_grr(xs, ys, ring, rng), ring)
    expect = ring.mul(flat, flat[::-1])
    if not np.array_equal(prod, expect):
        raise ConfigError("GRR product cross-validation failed")

    anchors = cfg.anchors()
    boxes, scores, cls = oracle.bbpred_fp(
        feats, anchors.initial_centers, anchors.iters, head, codec, frame=float(FRAME)
    )
    kept = oracle.nms_greedy(boxes, scores, cfg.eta)
    detections = _assemble_detections(boxes, scores, cls, kept)
    _, oracle_stages = oracle_infer(img, backbone, head, cfg)
    report = {
        "feature_extraction": float(
            np.abs(codec.decode(feats) - oracle_stages["features"]).max()
        ),
        "bbox_prediction": float(np.abs(boxes - oracle_stages["boxes"]).max()),
        "classification": float(np.abs(scores - oracle_stages["scores"]).max()),
        "kept_set_equal": list(kept) == list(oracle_stages["kept"]),
    }
    return detections, None, report, {"oracle": oracle_stages}


# -- bench ------------------------------------------------------------------------------------


def _bench_elementwise(protocol: str, n: int, codec, seed: int):
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-4, 4, n)
    ys = rng.uniform(-4, 4, n)
    enc_x = codec.encode(xs)
    enc_y = codec.encode(ys)
    x1 = codec.ring.rand(rng, n)
    x2 = codec.ring.sub(enc_x, x1)
    y1 = codec.ring.rand(rng, n)
    y2 = codec.ring.sub(enc_y, y1)

    if protocol == "comp":
        spec = needs_comp(n)

        def program(ctx, inp):
            a, b = inp
            return sec_comp(ctx, a, b)

        inputs = ((x1, y1), (x2, y2))
    elif protocol == "exp":
        spec = needs_exp(n)

        def program(ctx, inp):
            return sec_exp(ctx, inp)

        inputs = (x1, x2)
    elif protocol == "divi":
        den = codec.encode(np.abs(ys) + 0.5)
        d1 = codec.ring.rand(rng, n)
        d2 = codec.ring.sub(den, d1)
        spec = needs_divi(n)

        def program(ctx, inp):
            a, b = inp
            return sec_divi(ctx, a, b)

        inputs = ((x1, d1), (x2, d2))
    elif protocol in ("silu", "sigmoid"):
        from .layers import sec_silu, sec_sigmoid

        fn = sec_silu if protocol == "silu" else sec_sigmoid
        spec = needs_silu(n) if protocol == "silu" else needs_sigmoid(n)

        def program(ctx, inp):
            return fn(ctx, inp)

        inputs = (x1, x2)
    else:
        raise ConfigError(f"unknown bench protocol {protocol!r}")
    return program, inputs, spec


def bench(cfg: PipelineConfig, sizes, protocols=("comp", "exp", "divi", "silu", "sigmoid", "ds", "nms"),
          repeats: int = 3):
    """Wall time, rounds, and bytes per protocol and size; CSV-ready rows."""
    codec = cfg.codec()
    rows = []
    for protocol in protocols:
        for n in sizes:
            if protocol == "ds":
                rng = np.random.default_rng(cfg.seed)
                scores = rng.uniform(0, 1, n)
                enc = codec.encode(scores)
                s1 = codec.ring.rand(rng, n)
                s2 = codec.ring.sub(enc, s1)
                program, inputs, spec = (lambda ctx, x: sec_ds(ctx, x)), (s1, s2), {"offsets": 1}
            elif protocol == "nms":
                program, inputs, spec = _bench_nms(n, codec, cfg)
            else:
                program, inputs, spec = _bench_elementwise(protocol, n, codec, cfg.seed)
            times = []
            transcript = None
            for rep in range(repeats):
                bundles = dealer_mod.generate(cfg.seed + rep, spec, codec)
                t0 = time.perf_counter()
                _, _, transcript = run_two_party(
                    program, inputs, bundles, codec, transport="inproc"
                )
                times.append((time.perf_counter() - t0) * 1000)
            totals = transcript.totals()
            row = {
                "protocol": protocol,
                "n": n,
                "wall_ms": float(np.median(times)),
                "rounds": totals["rounds"],
                "elements": totals["elements"],
                "bytes": totals["bytes_sent"][1] + totals["bytes_sent"][2],
            }
            cited = account(transcript, {protocol: n})
            for r in cited:
                if r["protocol"] == protocol and "cited_rounds" in r:
                    row["cited_rounds"] = r["cited_rounds"]
                    row["cited_overhead"] = r["cited_overhead"]
            rows.append(row)
    return rows


def _bench_nms(n: int, codec, cfg: PipelineConfig):
    """Dense scene: suppression keeps the pair count near-linear in N."""
    rng = np.random.default_rng(cfg.seed)
    centers = rng.uniform(16, 48, (n, 2))
    sizes = rng.uniform(20, 28, (n, 2))
    boxes = np.stack(
        [
            centers[:, 0] - sizes[:, 0] / 2,
            centers[:, 1] - sizes[:, 1] / 2,
            centers[:, 0] + sizes[:, 0] / 2,
            centers[:, 1] + sizes[:, 1] / 2,
        ],
        axis=1,
    )
    scores = rng.uniform(0, 1, n)
    kept = oracle.nms_greedy(boxes, scores, cfg.eta)
    pair_budget = int((len(kept) + 4) * n * 1.2)
    spec = {"offsets": 1, "comp_masks": 7 * pair_budget, "triples": 7 * pair_budget}

    enc_b = codec.encode(boxes)
    enc_s = codec.encode(scores)
    b1 = codec.ring.rand(rng, enc_b.shape)
    b2 = codec.ring.sub(enc_b, b1)
    s1 = codec.ring.rand(rng, n)
    s2 = codec.ring.sub(enc_s, s1)

    def program(ctx, inp):
        bx, sc = inp
        kept_idx, _ = sec_nms(ctx, BoxSet(ctx.party_id, bx, sc), cfg.eta)
        return kept_idx

    return program, ((b1, s1), (b2, s2)), spec


def write_bench_csv(rows, path) -> None:
    cols = ["protocol", "n", "wall_ms", "rounds", "elements", "bytes", "cited_rounds", "cited_overhead"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(str(r.get(c, "")) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def write_detections_jsonl(detections, path) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(json.dumps(d.as_dict()) + "\n")
