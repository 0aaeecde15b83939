"""Plaintext oracles: fixed-point forward pass, float references, greedy NMS,
and IoU-distance k-means.

The fixed-point runner consumes the same weights file and codec as the
secure path but computes on plain encodings with exact truncation, so the
secure pipeline can be scored against it element by element.  The float
helpers are the independent mathematical references used by the tests.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .layers import (
    BNParams,
    Concat,
    ConvParams,
    Op,
    Seq,
    _pool_windows,
    conv_field,
)
from .numeric import FixedPointCodec

KMEANS_LARGE = 1000.0  # incumbent-distance sentinel shared with the secure path


# -- float references -----------------------------------------------------------


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def iou(box_a, box_b) -> np.ndarray:
    """IoU of (..., 4) corner boxes; degenerate unions give 0."""
    a = np.asarray(box_a, dtype=np.float64)
    b = np.asarray(box_b, dtype=np.float64)
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-30), 0.0)


def nms_greedy(boxes, scores, eta: float):
    """Kept indices of plaintext greedy suppression at IoU threshold eta."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    order = list(np.argsort(-scores, kind="stable"))
    kept = []
    while order:
        top = order.pop(0)
        kept.append(top)
        if not order:
            break
        rest = np.array(order)
        overlaps = iou(boxes[top][None, :], boxes[rest])
        order = [k for k, o in zip(order, overlaps) if o < eta]
    return kept


def kmeans_iou(boxes, centers, iters: int):
    """K-means with distance 1 - IoU; mirrors the secure control flow.

    Assignment scans centers in order with strict-improvement updates (first
    minimum wins); empty clusters reset to the zero box, matching the secure
    path's dealer-offset fallback under trivial randomness.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    centers = np.array(centers, dtype=np.float64)
    assign = np.zeros(len(boxes), dtype=int)
    for _ in range(iters):
        dv = np.full(len(boxes), KMEANS_LARGE)
        assign = np.zeros(len(boxes), dtype=int)
        for c in range(len(centers)):
            d = 1.0 - iou(boxes, centers[c][None, :])
            better = d < dv
            dv = np.where(better, d, dv)
            assign = np.where(better, c, assign)
        for c in range(len(centers)):
            sel = assign == c
            centers[c] = boxes[sel].mean(axis=0) if sel.any() else 0.0
    return assign, centers


# -- fixed-point layer mirror -----------------------------------------------------


def conv_fp(x_enc, params: ConvParams, codec: FixedPointCodec):
    out = conv_field(x_enc, params, codec, add_bias=True)
    return codec.trunc_exact(out)


def bn_fp(x_enc, params: BNParams, codec: FixedPointCodec):
    ring = codec.ring
    a, shift = params.scale_shift()
    centered = ring.sub(x_enc, codec.encode(params.mean)[:, None, None])
    scaled = ring.mul(centered, codec.encode(a)[:, None, None])
    return ring.add(codec.trunc_exact(scaled), codec.encode(shift)[:, None, None])


def silu_fp(x_enc, codec: FixedPointCodec):
    return codec.encode(silu(codec.decode(x_enc)))


def sigmoid_fp(x_enc, codec: FixedPointCodec):
    return codec.encode(sigmoid(codec.decode(x_enc)))


def maxpool_fp(x_enc, window: int, stride: int, codec: FixedPointCodec):
    pad_value = codec.encode(-float((1 << codec.l) - 1))
    stack = _pool_windows(x_enc, window, stride, pad_value)
    signed = codec.ring.to_signed(stack)
    return codec.ring.from_signed(signed.max(axis=0))


def candidates_fp(features_enc, codec: FixedPointCodec, frame: float = 64.0) -> np.ndarray:
    """Plaintext mirror of per-cell candidate extraction: float (N, 4) boxes."""
    t = codec.decode(sigmoid_fp(features_enc[:4], codec))
    _, gh, gw = t.shape
    cell = frame / gh
    cols, rows = np.meshgrid(np.arange(gw), np.arange(gh))
    cx = cols.reshape(-1) * cell + t[0].reshape(-1) * cell
    cy = rows.reshape(-1) * cell + t[1].reshape(-1) * cell
    w = (2.0 * t[2].reshape(-1)) ** 2 * (cell / 2.0) + 0.5
    h = (2.0 * t[3].reshape(-1)) ** 2 * (cell / 2.0) + 0.5
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def bbpred_fp(features_enc, initial_centers, iters: int, head, codec: FixedPointCodec,
              frame: float = 64.0):
    """Plaintext box prediction: clustering then the head over the centers.

    Returns (boxes, scores, class_probs) as floats.  ``initial_centers``
    must be explicit; the secure path's dealer-randomized seeding has no
    plaintext counterpart.
    """
    conv_params, bn_params = head
    cands = candidates_fp(features_enc, codec, frame)
    _assign, centers = kmeans_iou(cands, np.asarray(initial_centers, dtype=np.float64), iters)
    k = centers.shape[0]
    center_map = codec.encode(centers.T.reshape(4, k, 1))
    t = sigmoid_fp(bn_fp(conv_fp(center_map, conv_params, codec), bn_params, codec), codec)
    t = codec.decode(t)
    return centers, t[0].reshape(-1), t[1:].reshape(t.shape[0] - 1, -1).T.copy()


def run_graph_fp(node, x_enc, codec: FixedPointCodec):
    """Plaintext fixed-point execution of a block graph on encodings."""
    if isinstance(node, Seq):
        for item in node.items:
            x_enc = run_graph_fp(item, x_enc, codec)
        return x_enc
    if isinstance(node, Concat):
        return np.concatenate([run_graph_fp(b, x_enc, codec) for b in node.branches], axis=0)
    if isinstance(node, Op):
        if node.kind == "conv":
            return conv_fp(x_enc, node.params, codec)
        if node.kind == "bn":
            return bn_fp(x_enc, node.params, codec)
        if node.kind == "silu":
            return silu_fp(x_enc, codec)
        if node.kind == "sigmoid":
            return sigmoid_fp(x_enc, codec)
        if node.kind == "maxpool":
            window, stride = node.params
            return maxpool_fp(x_enc, window, stride, codec)
    raise ShapeError(f"unknown node {node!r}")
