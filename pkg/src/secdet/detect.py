"""Secure detection head: shared-box IoU, box prediction with anchor
clustering, descending sort, and non-maximum suppression.

Boxes are (N, 4) share arrays of canonical corners (x1, y1, x2, y2).  The
sort and the suppression decisions are public by design: masked scores and
width/height share differences cross the wire, never absolute corners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import sec_bn, sec_conv, sec_sigmoid
from .oracle import KMEANS_LARGE
from .protocols import _divi_core, mul_beaver, sec_comp, select, to_masked_real, to_field
from .transport import PartyCtx

NMS_LEAKAGE = {"ds.masked", "nms.wh", "nms.suppress"}


@dataclass
class BoxShare:
    """One party's share of a single box with its confidence."""

    x1: int
    y1: int
    x2: int
    y2: int
    score: int
    party_id: int = 1


@dataclass
class BoxSet:
    """One party's shares of a batch of boxes; the count is public."""

    party_id: int
    boxes: np.ndarray  # (N, 4) uint64
    scores: np.ndarray  # (N,) uint64
    class_probs: np.ndarray | None = None  # (N, nc) uint64

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, idx) -> "BoxSet":
        cp = None if self.class_probs is None else self.class_probs[idx]
        return BoxSet(self.party_id, self.boxes[idx], self.scores[idx], cp)


@dataclass
class AnchorConfig:
    cluster_count: int = 9
    iters: int = 3  # clustering iteration cap
    initial_centers: np.ndarray | None = None  # (k, 4) shares

    def __post_init__(self):
        if self.cluster_count < 1 or self.iters < 1:
            raise ValueError("cluster count and iteration cap must be >= 1")


# -- secure IoU ----------------------------------------------------------------------


def _pairwise_minmax(ctx, a, b, want_max: bool):
    f = sec_comp(ctx, a, b)  # 1{a < b}
    return select(ctx, f, b, a) if want_max else select(ctx, f, a, b)


def _clamp_nonneg(ctx, v):
    zero = np.zeros_like(v)
    f = sec_comp(ctx, zero, v)  # 1{0 < v}
    return select(ctx, f, v, zero)


def _intersection_corners(ctx, box_a, box_b):
    """Batched lower (max) and upper (min) intersection corners.

    One comparison batch covers all four coordinates: where a < b the lower
    corners take b and the upper corners take a, so a single select with
    swapped operands serves both halves.
    """
    n = box_a.shape[0]
    a_cat = np.concatenate([box_a[:, 0], box_a[:, 1], box_a[:, 2], box_a[:, 3]])
    b_cat = np.concatenate([box_b[:, 0], box_b[:, 1], box_b[:, 2], box_b[:, 3]])
    f = sec_comp(ctx, a_cat, b_cat)
    pick_when_less = np.concatenate([b_cat[: 2 * n], a_cat[2 * n :]])
    pick_when_geq = np.concatenate([a_cat[: 2 * n], b_cat[2 * n :]])
    sel = select(ctx, f, pick_when_less, pick_when_geq)
    return sel[: 2 * n], sel[2 * n :]  # (lo_x|lo_y), (hi_x|hi_y)


def sec_iou(ctx: PartyCtx, box_a: np.ndarray, box_b: np.ndarray) -> np.ndarray:
    """Shares of IoU for each row pair of two (N, 4) share arrays.

    Intersection corners come from compare-and-select; negative extents are
    clamped per axis before the area product, and a degenerate zero union
    publicly maps to IoU 0.
    """
    with ctx.begin("iou"):
        ring = ctx.ring
        n = box_a.shape[0]
        lo, hi = _intersection_corners(ctx, box_a, box_b)
        extents = _clamp_nonneg(ctx, ring.sub(hi, lo))  # iw then ih
        inter = mul_beaver(ctx, extents[:n], extents[n:])
        wa = ring.sub(box_a[:, 2], box_a[:, 0])
        ha = ring.sub(box_a[:, 3], box_a[:, 1])
        wb = ring.sub(box_b[:, 2], box_b[:, 0])
        hb = ring.sub(box_b[:, 3], box_b[:, 1])
        areas = mul_beaver(ctx, np.concatenate([wa, wb]), np.concatenate([ha, hb]))
        union = ring.sub(ring.add(areas[:n], areas[n:]), inter)
        both = to_masked_real(ctx, np.concatenate([inter, union]))
        q, _ = _divi_core(ctx, both[:n], both[n:], zero_map=True)
        return to_field(ctx, q)


# -- secure descending sort ------------------------------------------------------------


def sec_ds(ctx: PartyCtx, scores: np.ndarray) -> np.ndarray:
    """Public descending index permutation of a shared score array.

    Both parties add shares of one common dealer offset to every element and
    open the masked values; the common shift preserves order exactly (the
    offset range cannot wrap for in-range encodings), and pairwise score
    differences are the documented leak.  One simultaneous round, 2N
    elements on the wire.
    """
    with ctx.begin("ds"):
        ring = ctx.ring
        off = ctx.bundle.take("offsets", 1)["o"]
        masked = ring.add(scores, off[0])
        opened = ctx.open_field(masked, "ds.masked")
        keys = ring.to_signed(opened)
        return np.argsort(-keys, kind="stable")


# -- secure NMS -------------------------------------------------------------------------


def sec_nms(ctx: PartyCtx, boxes: BoxSet, eta: float):
    """Greedy suppression on shared boxes; returns (kept indices, kept subset).

    Widths and heights are exchanged as share differences and areas derived
    from them publicly; the order comes from the masked sort.  Each round
    suppresses every remaining box whose intersection area with the current
    top box satisfies s >= eta/(1+eta) * (S_top + S_k), which is the
    threshold form of IoU >= eta, decided by one opened comparison bit.
    """
    with ctx.begin("nms"):
        ring = ctx.ring
        codec = ctx.codec
        n = len(boxes)
        if n == 0:
            return [], boxes.subset(np.array([], dtype=int))

        w_share = ring.sub(boxes.boxes[:, 2], boxes.boxes[:, 0])
        h_share = ring.sub(boxes.boxes[:, 3], boxes.boxes[:, 1])
        ctx.note_open("nms.wh")
        other = ctx.exchange(np.concatenate([w_share, h_share]))
        widths = codec.decode(ring.add(w_share, other[:n]))
        heights = codec.decode(ring.add(h_share, other[n:]))
        areas = widths * heights  # public, step-4 style

        order = list(sec_ds(ctx, boxes.scores))
        kept: list[int] = []
        factor = eta / (1.0 + eta)
        while order:
            top = order.pop(0)
            kept.append(top)
            if not order:
                break
            rest = np.array(order, dtype=int)
            inter = _intersection_area(ctx, boxes.boxes, top, rest)
            thresholds = codec.encode(factor * (areas[top] + areas[rest]))
            thr_share = thresholds if ctx.party_id == 1 else np.zeros_like(thresholds)
            keep_bit = sec_comp(ctx, inter, thr_share)  # 1{inter < threshold}
            opened = ctx.open_field(keep_bit, "nms.suppress")
            order = [k for k, bit in zip(order, opened) if bit == 1]
        return kept, boxes.subset(np.array(kept, dtype=int))


def _intersection_area(ctx, box_shares, top: int, rest: np.ndarray):
    ring = ctx.ring
    m = len(rest)
    a = np.broadcast_to(box_shares[top], (m, 4))
    b = box_shares[rest]
    lo, hi = _intersection_corners(ctx, a, b)
    extents = _clamp_nonneg(ctx, ring.sub(hi, lo))
    return mul_beaver(ctx, extents[:m], extents[m:])


# -- secure box prediction ---------------------------------------------------------------


def masked_ratio_prefilter(ctx: PartyCtx, values: np.ndarray) -> np.ndarray:
    """Masked-difference selection and ratio distance for shared scalars.

    Parties subtract their halves of a dealer offset, party 2 sends its
    masked share to party 1, and the re-masked difference is published; its
    sign picks either the value share or the offset share.  The picked and
    complementary values are divided securely and folded into 0.5 - ratio.
    """
    with ctx.begin("bbpred.prefilter"):
        ring = ctx.ring
        n = values.size
        off = ctx.bundle.take("box_offsets", n)["o"]
        my_masked = ring.sub(values, off)
        ctx.note_open("bbpred.pbar")
        if ctx.party_id == 1:
            lam = ctx.recv_from_other()
            pbar = ring.sub(my_masked, lam)
            ctx.send_to_other(pbar)
        else:
            ctx.send_to_other(my_masked)
            pbar = ctx.recv_from_other()
        pick_value = ring.to_signed(pbar) < 0
        picked = np.where(pick_value, values, off)
        complement = ring.sub(ring.add(values, off), picked)
        both = to_masked_real(ctx, np.concatenate([picked, complement]))
        ratio, _ = _divi_core(ctx, both[:n], both[n:], zero_map=True)
        d = to_field(ctx, -ratio)
        if ctx.party_id == 1:
            d = ring.add(d, ctx.codec.encode(np.full(n, 0.5)))
        return d


def _cluster_assign(ctx: PartyCtx, samples: np.ndarray, centers: np.ndarray):
    """One assignment pass: strict-improvement scan over centers in order."""
    ring = ctx.ring
    n = samples.shape[0]
    k = centers.shape[0]
    dv = ctx.codec.encode(np.full(n, KMEANS_LARGE)) if ctx.party_id == 1 else np.zeros(n, dtype=np.uint64)
    one_enc = ctx.codec.encode(1.0)
    assign = []
    for c in range(k):
        overlap = sec_iou(ctx, samples, np.broadcast_to(centers[c], (n, 4)))
        d = ring.sub(one_enc if ctx.party_id == 1 else np.uint64(0), overlap)
        better = sec_comp(ctx, d, dv)  # 1{d < dv}
        dv = select(ctx, better, d, dv)
        if assign:
            stale = np.stack(assign)  # clear prior winners where this one took over
            not_better = ring.sub(
                np.uint64(1) if ctx.party_id == 1 else np.uint64(0), better
            )
            cleared = mul_beaver(
                ctx, stale, np.broadcast_to(not_better, stale.shape), scaled=False
            )
            assign = [cleared[i] for i in range(len(assign))]
        assign.append(better)
    return np.stack(assign), dv  # (k, n) bits


def _ring_sum(ring, arr, axis):
    """Reduce with ring addition (uint64 sums would overflow past 8 terms)."""
    arr = np.moveaxis(arr, axis, 0)
    acc = arr[0]
    for j in range(1, arr.shape[0]):
        acc = ring.add(acc, arr[j])
    return acc


def _update_centers(ctx: PartyCtx, samples: np.ndarray, assign: np.ndarray):
    """SSAdd-average of assigned samples per cluster; empty clusters fall
    back to a dealer offset box (publicly visible via the zero count)."""
    ring = ctx.ring
    codec = ctx.codec
    k, n = assign.shape
    weighted = mul_beaver(
        ctx,
        np.repeat(assign[:, :, None], 4, axis=2),
        np.broadcast_to(samples[None, :, :], (k, n, 4)),
        scaled=False,
    )
    sums = _ring_sum(ring, weighted, axis=1)  # (k, 4)
    counts = _ring_sum(ring, assign, axis=1)  # (k,)
    count_enc = ring.mul(counts, np.uint64(codec.scale))  # integer -> scale f
    both = to_masked_real(
        ctx, np.concatenate([sums.reshape(-1), np.repeat(count_enc, 4)])
    )
    m = k * 4
    coords, degenerate = _divi_core(ctx, both[:m], both[m:], zero_map=True)
    centers = to_field(ctx, coords).reshape(k, 4)
    fallback = ctx.bundle.take("box_offsets", m)["o"].reshape(k, 4)
    centers = np.where(degenerate.reshape(k, 4), fallback, centers)
    return centers, counts


def cluster_boxes(ctx: PartyCtx, boxes: np.ndarray, centers: np.ndarray, iters: int):
    """Secure k-means over shared boxes with distance 1 - IoU.

    Returns the final one-hot assignment bit shares (k, N) and the refined
    center shares (k, 4).  Control flow mirrors ``oracle.kmeans_iou``.
    """
    assign = None
    for _ in range(iters):
        assign, _dv = _cluster_assign(ctx, boxes, centers)
        centers, _counts = _update_centers(ctx, boxes, assign)
    return assign, centers


def candidate_boxes(ctx: PartyCtx, features: np.ndarray, frame: float = 64.0):
    """Per-cell candidate boxes from the first four feature channels.

    A sigmoid squashes the channels to (0, 1); cell-relative centers and
    quadratic extents are then share-local affine maps of the squashed
    values, one interactive square per cell pair.
    """
    ring = ctx.ring
    if features.shape[0] < 4:
        raise ValueError("candidate extraction needs >= 4 feature channels")
    t = sec_sigmoid(ctx, features[:4])
    _, gh, gw = t.shape
    n = gh * gw
    cell = frame / gh
    sx, sy, sw, sh = (t[i].reshape(-1) for i in range(4))
    cols, rows = np.meshgrid(np.arange(gw), np.arange(gh))
    base_x = (cols.reshape(-1) * cell).astype(np.float64)
    base_y = (rows.reshape(-1) * cell).astype(np.float64)
    cx = _scale_shift(ctx, sx, cell, base_x)
    cy = _scale_shift(ctx, sy, cell, base_y)
    two_sw = ring.add(sw, sw)
    two_sh = ring.add(sh, sh)
    ext = mul_beaver(ctx, np.concatenate([two_sw, two_sh]), np.concatenate([two_sw, two_sh]))
    uw = _scale_shift(ctx, ext[:n], cell / 2.0, np.full(n, 0.5))
    uh = _scale_shift(ctx, ext[n:], cell / 2.0, np.full(n, 0.5))
    return _corners(ctx, cx, cy, uw, uh)


def sec_bbpred(ctx: PartyCtx, features: np.ndarray, anchors: AnchorConfig, head) -> BoxSet:
    """Candidate clustering followed by a box-classification head.

    Per-cell candidate boxes from the feature map are k-means-clustered with
    distance 1 - IoU for the configured iteration cap; the refined cluster
    centers become the predicted boxes.  The head convolution, normalization,
    and sigmoid run on the center coordinates themselves, yielding an
    objectness score and per-class probabilities in [0, 1] for each box.
    """
    conv_params, bn_params = head
    with ctx.begin("bbpred"):
        candidates = candidate_boxes(ctx, features)
        centers = anchors.initial_centers
        if centers is None:
            obj_proxy = ctx.ring.sub(candidates[:, 2], candidates[:, 0])
            centers = _initial_centers_by_prefilter(
                ctx, candidates, anchors.cluster_count, obj_proxy
            )
        _assign, centers = cluster_boxes(ctx, candidates, centers, anchors.iters)

        k = centers.shape[0]
        center_map = centers.T.reshape(4, k, 1)  # boxes as a (4, k, 1) map
        t = sec_conv(ctx, center_map, conv_params)
        t = sec_bn(ctx, t, bn_params)
        t = sec_sigmoid(ctx, t)
        scores = t[0].reshape(-1)
        cls = t[1:].reshape(t.shape[0] - 1, -1).T.copy()
        return BoxSet(ctx.party_id, centers, scores, cls)


def _scale_shift(ctx, x, scale: float, shift: np.ndarray):
    """Share-local multiply by a public scale plus a public shift."""
    codec = ctx.codec
    scaled = codec.ring.mul(x, codec.encode(scale))
    out = codec.trunc_share(ctx.rerandomize(scaled), ctx.party_id)
    if ctx.party_id == 1:
        out = codec.ring.add(out, codec.encode(shift))
    return out


def _corners(ctx, cx, cy, w, h):
    ring = ctx.ring
    halfw = ctx.codec.trunc_share(ctx.rerandomize(ring.mul(w, ctx.codec.encode(0.5))), ctx.party_id)
    halfh = ctx.codec.trunc_share(ctx.rerandomize(ring.mul(h, ctx.codec.encode(0.5))), ctx.party_id)
    return np.stack(
        [ring.sub(cx, halfw), ring.sub(cy, halfh), ring.add(cx, halfw), ring.add(cy, halfh)],
        axis=1,
    )


def _initial_centers_by_prefilter(ctx, candidates, k, obj_scores):
    """Masked-ratio prefilter orders the candidates; top-k seed the centers."""
    d0 = masked_ratio_prefilter(ctx, obj_scores)
    order = sec_ds(ctx, d0)
    return candidates[order[:k]]


# -- dealer sizing -----------------------------------------------------------------------


def needs_iou(n: int) -> dict:
    return {
        "comp_masks": 6 * n,
        "triples": 9 * n,
        "real_masks": 2 * n,
        "div_masks": n,
        "real_triples": 2 * n,
    }


def needs_ds() -> dict:
    return {"offsets": 1}


def needs_nms(n: int) -> dict:
    """Worst case: every box kept, quadratic pair count."""
    pairs = n * (n - 1) // 2
    return {
        "offsets": 1,
        "comp_masks": 7 * pairs,  # corner min/max, clamps, threshold test
        "triples": 7 * pairs,
    }


def needs_bbpred(grid: int, k: int, iters: int, nc: int) -> dict:
    from .dealer import merge_specs
    from .layers import needs_sigmoid

    n = grid * grid
    spec = needs_sigmoid(4 * n)  # candidate squashing
    spec = merge_specs(spec, {"triples": 2 * n})  # quadratic extents
    # prefilter + its sort (worst case: no initial centers supplied)
    spec = merge_specs(spec, {"box_offsets": n, "offsets": 1}, needs_divi_local(n))
    per_center = merge_specs(needs_iou(n), {"comp_masks": n, "triples": n})
    per_iter = {kk: v * k for kk, v in per_center.items()}
    per_iter = merge_specs(
        per_iter,
        {"triples": (k * (k - 1) // 2) * n},  # assignment-bit clearing
        {"triples": 4 * k * n, "box_offsets": 4 * k},  # center update + fallback
        needs_divi_local(4 * k),
    )
    for _ in range(iters):
        spec = merge_specs(spec, per_iter)
    spec = merge_specs(spec, needs_sigmoid((1 + nc) * k))  # head on centers
    return spec


def needs_divi_local(n: int) -> dict:
    return {"div_masks": n, "real_triples": 2 * n, "real_masks": 2 * n}
