import numpy as np
import pytest

from conftest import DEFAULT_CODEC, run_protocol
from secdet import detect, layers, oracle
from secdet.dealer import generate_trivial, merge_specs
from secdet.detect import AnchorConfig, BoxSet, needs_bbpred, needs_iou, needs_nms
from secdet.protocols import reconstruct
from secdet.transport import run_two_party

CODEC = DEFAULT_CODEC
RING = CODEC.ring


def share_array(x, rng):
    enc = CODEC.encode(np.asarray(x, dtype=np.float64))
    s1 = RING.rand(rng, enc.shape)
    return s1, RING.sub(enc, s1)


def _iou_program(ctx, inputs):
    a, b = inputs
    return reconstruct(ctx, detect.sec_iou(ctx, a, b))


def test_sec_iou_examples():
    rng = np.random.default_rng(0)
    boxes_a = np.array(
        [
            [1.0, 1.0, 3.0, 3.0],  # identical pair
            [0.0, 0.0, 1.0, 1.0],  # disjoint pair
            [0.0, 0.0, 1.0, 1.0],  # half-overlapping unit squares
        ]
    )
    boxes_b = np.array(
        [
            [1.0, 1.0, 3.0, 3.0],
            [5.0, 5.0, 6.0, 6.0],
            [0.5, 0.0, 1.5, 1.0],
        ]
    )
    a1, a2 = share_array(boxes_a, rng)
    b1, b2 = share_array(boxes_b, rng)
    out1, _, _ = run_protocol(_iou_program, (a1, b1), (a2, b2), needs_iou(3))
    got = CODEC.decode(out1)
    assert abs(got[0] - 1.0) <= 1e-3
    assert abs(got[1]) <= 1e-3
    assert abs(got[2] - 1.0 / 3.0) <= 1e-3


def test_sec_iou_random_vs_float():
    rng = np.random.default_rng(1)
    n = 200
    a = _random_boxes(rng, n)
    b = _random_boxes(rng, n)
    a1, a2 = share_array(a, rng)
    b1, b2 = share_array(b, rng)
    out1, _, _ = run_protocol(_iou_program, (a1, b1), (a2, b2), needs_iou(n))
    ref = oracle.iou(CODEC.decode(CODEC.encode(a)), CODEC.decode(CODEC.encode(b)))
    assert np.abs(CODEC.decode(out1) - ref).max() <= 1e-3


def _random_boxes(rng, n, span=60.0):
    x1 = rng.uniform(0, span - 8, n)
    y1 = rng.uniform(0, span - 8, n)
    w = rng.uniform(1, 8, n)
    h = rng.uniform(1, 8, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def _ds_program(ctx, scores):
    return detect.sec_ds(ctx, scores)


def test_sec_ds_examples():
    rng = np.random.default_rng(2)
    s1, s2 = share_array([3.0, 1.0, 2.0], rng)
    perm, perm2, transcript = run_protocol(_ds_program, s1, s2, {"offsets": 1})
    assert perm.tolist() == [0, 2, 1]
    assert np.array_equal(perm, perm2)  # both parties learn the same order
    totals = transcript.totals("ds")
    assert totals["rounds"] == 1
    assert totals["elements"] == 2 * 3  # 2N

    e1, e2 = share_array([4.0, 4.0, 4.0, 4.0], rng)
    perm, _, _ = run_protocol(_ds_program, e1, e2, {"offsets": 1})
    assert perm.tolist() == [0, 1, 2, 3]  # stable tie rule


def test_sec_ds_matches_argsort_and_shift_invariance():
    rng = np.random.default_rng(3)
    for trial in range(50):
        n = int(rng.integers(2, 40))
        scores = rng.uniform(-100, 100, n)
        s1, s2 = share_array(scores, rng)
        perm, _, _ = run_protocol(_ds_program, s1, s2, {"offsets": 1}, seed=trial)
        expect = np.argsort(-CODEC.decode(CODEC.encode(scores)), kind="stable")
        assert np.array_equal(perm, expect)
        # adding a common constant leaves the permutation unchanged
        c1, c2 = share_array(scores + 55.0, rng)
        perm_c, _, _ = run_protocol(_ds_program, c1, c2, {"offsets": 1}, seed=trial)
        assert np.array_equal(perm_c, perm)


def _nms_program(eta):
    def program(ctx, inputs):
        boxes, scores = inputs
        bs = BoxSet(ctx.party_id, boxes, scores)
        kept, subset = detect.sec_nms(ctx, bs, eta)
        return kept, reconstruct(ctx, subset.boxes)

    return program


def test_sec_nms_examples():
    rng = np.random.default_rng(4)
    # two identical boxes: one kept (the higher score)
    boxes = np.array([[1.0, 1.0, 4.0, 4.0], [1.0, 1.0, 4.0, 4.0]])
    scores = np.array([0.7, 0.9])
    b1, b2 = share_array(boxes, rng)
    s1, s2 = share_array(scores, rng)
    (kept, rec), _, _ = run_protocol(_nms_program(0.5), (b1, s1), (b2, s2), needs_nms(2))
    assert kept == [1]
    assert np.abs(CODEC.decode(rec) - boxes[1]).max() <= 1e-3

    # disjoint boxes: both kept
    boxes = np.array([[0.0, 0.0, 2.0, 2.0], [10.0, 10.0, 12.0, 12.0]])
    scores = np.array([0.4, 0.8])
    b1, b2 = share_array(boxes, rng)
    s1, s2 = share_array(scores, rng)
    (kept, _), _, _ = run_protocol(_nms_program(0.5), (b1, s1), (b2, s2), needs_nms(2))
    assert kept == [1, 0]


def test_sec_nms_random_scenes_vs_oracle():
    rng = np.random.default_rng(5)
    eta = 0.5
    for trial in range(30):
        n = int(rng.integers(2, 24))
        boxes = _random_boxes(rng, n, span=30.0)
        scores = rng.uniform(0.05, 1.0, n)
        bq = CODEC.decode(CODEC.encode(boxes))
        sq = CODEC.decode(CODEC.encode(scores))
        expected = oracle.nms_greedy(bq, sq, eta)

        b1, b2 = share_array(boxes, rng)
        s1, s2 = share_array(scores, rng)
        (kept, _), _, _ = run_protocol(
            _nms_program(eta), (b1, s1), (b2, s2), needs_nms(n), seed=trial
        )
        pair_ious = oracle.iou(bq[:, None, :], bq[None, :, :])
        near_band = np.abs(pair_ious - eta) <= 1e-4
        if not near_band.any():
            assert kept == expected, f"trial {trial}"
        assert kept[0] == int(np.argmax(sq))  # top box always survives


def test_sec_nms_empty_input():
    empty = np.zeros((0, 4), dtype=np.uint64)
    scores = np.zeros(0, dtype=np.uint64)

    def program(ctx, _):
        bs = BoxSet(ctx.party_id, empty, scores)
        kept, subset = detect.sec_nms(ctx, bs, 0.5)
        return kept, len(subset)

    (kept, count), _, _ = run_protocol(program, None, None, {})
    assert kept == [] and count == 0


def test_sec_nms_leaks_only_documented_values():
    rng = np.random.default_rng(6)
    boxes = _random_boxes(rng, 6)
    scores = rng.uniform(0, 1, 6)
    b1, b2 = share_array(boxes, rng)
    s1, s2 = share_array(scores, rng)
    _, _, transcript = run_protocol(_nms_program(0.5), (b1, s1), (b2, s2), needs_nms(6))
    for pid in (1, 2):
        for span in transcript.spans[pid]:
            if span.protocol == "nms":
                direct = {t for t in span.open_tags}
                assert direct <= detect.NMS_LEAKAGE | {"mul.de", "comp.e", "comp.m", "to_real.masked", "mul.real.de", "divi.w"}
                # absolute corners never cross the wire: only masked openings
                assert "boxes" not in " ".join(span.open_tags)


def test_cluster_boxes_zero_randomness_matches_plain_kmeans():
    rng = np.random.default_rng(7)
    n, k = 16, 3
    boxes = _random_boxes(rng, n, span=40.0)
    centers0 = boxes[:k].copy()
    bq = CODEC.decode(CODEC.encode(boxes))

    def program(ctx, inputs):
        b, c = inputs
        assign, centers = detect.cluster_boxes(ctx, b, c, iters=3)
        return reconstruct(ctx, assign), reconstruct(ctx, centers)

    spec = needs_bbpred(4, k, 3, 1)  # generous sizing
    bundles = generate_trivial(spec, CODEC)
    b_enc = CODEC.encode(boxes)
    c_enc = CODEC.encode(centers0)
    zero_b = np.zeros_like(b_enc)
    zero_c = np.zeros_like(c_enc)
    (assign_rec, centers_rec), _, _ = run_two_party(
        program, ((b_enc, c_enc), (zero_b, zero_c)), bundles, CODEC, transport="inproc"
    )
    got_assign = np.argmax(assign_rec, axis=0)
    exp_assign, exp_centers = oracle.kmeans_iou(bq, bq[:k].copy(), iters=3)
    assert np.array_equal(got_assign, exp_assign)
    assert np.abs(CODEC.decode(centers_rec) - exp_centers).max() <= 1e-2


def test_cluster_boxes_two_separated_samples():
    rng = np.random.default_rng(8)
    boxes = np.array([[0.0, 0.0, 4.0, 4.0], [40.0, 40.0, 50.0, 50.0]])
    centers0 = boxes.copy()

    def program(ctx, inputs):
        b, c = inputs
        assign, centers = detect.cluster_boxes(ctx, b, c, iters=3)
        return reconstruct(ctx, assign), reconstruct(ctx, centers)

    b1, b2 = share_array(boxes, rng)
    c1, c2 = share_array(centers0, rng)
    spec = needs_bbpred(2, 2, 3, 1)
    (assign_rec, centers_rec), _, _ = run_protocol(program, (b1, c1), (b2, c2), spec)
    assign = np.argmax(assign_rec, axis=0)
    assert assign.tolist() == [0, 1]  # each sample its own center
    got_centers = CODEC.decode(centers_rec)
    assert np.abs(got_centers - boxes).max() <= 5e-3


def test_sec_bbpred_single_cluster_degenerate():
    rng = np.random.default_rng(9)
    nc = 2
    conv = layers.init_conv(rng, 4, 1 + nc, 1, 1)  # head runs on box coordinates
    bn = layers.init_bn(rng, 1 + nc)
    features = rng.uniform(-1, 1, (4, 1, 1))  # one cell -> one candidate box
    anchors = AnchorConfig(cluster_count=1, iters=2, initial_centers=None)

    def program(ctx, s):
        bs = detect.sec_bbpred(ctx, s, anchors, (conv, bn))
        return (
            reconstruct(ctx, bs.boxes),
            reconstruct(ctx, bs.scores),
            reconstruct(ctx, bs.class_probs),
        )

    s1, s2 = share_array(features, rng)
    spec = needs_bbpred(1, 1, 2, nc)
    (boxes_rec, scores_rec, cls_rec), _, _ = run_protocol(program, s1, s2, spec)
    boxes = CODEC.decode(boxes_rec)
    assert boxes.shape == (1, 4)
    # single sample, single cluster: the refined center is the sample itself
    enc = CODEC.encode(features)
    cand = oracle.candidates_fp(enc, CODEC)
    assert np.abs(boxes[0] - cand[0]).max() <= 2e-3
    # and the head output is sigmoid(bn(conv(center)))
    center_map = CODEC.encode(boxes.T.reshape(4, 1, 1))
    t = oracle.sigmoid_fp(oracle.bn_fp(oracle.conv_fp(center_map, conv, CODEC), bn, CODEC), CODEC)
    t_dec = CODEC.decode(t)
    assert abs(CODEC.decode(scores_rec)[0] - t_dec[0, 0, 0]) <= 2e-3
    assert np.abs(CODEC.decode(cls_rec)[0] - t_dec[1:, 0, 0]).max() <= 2e-3
    x1, y1, x2, y2 = boxes[0]
    assert x2 >= x1 and y2 >= y1


def test_sec_bbpred_matches_oracle_with_fixed_centers():
    rng = np.random.default_rng(10)
    nc = 3
    conv = layers.init_conv(rng, 4, 1 + nc, 1, 1)
    bn = layers.init_bn(rng, 1 + nc)
    features = rng.uniform(-1, 1, (4, 4, 4))
    centers0 = np.array(
        [[4.0, 4.0, 12.0, 12.0], [20.0, 20.0, 44.0, 44.0]], dtype=np.float64
    )
    anchors = AnchorConfig(
        cluster_count=2, iters=2, initial_centers=None
    )

    def program(ctx, inputs):
        s, c0 = inputs
        cfg = AnchorConfig(cluster_count=2, iters=2, initial_centers=c0)
        bs = detect.sec_bbpred(ctx, s, cfg, (conv, bn))
        return (
            reconstruct(ctx, bs.boxes),
            reconstruct(ctx, bs.scores),
            reconstruct(ctx, bs.class_probs),
        )

    s1, s2 = share_array(features, rng)
    c1, c2 = share_array(centers0, rng)
    spec = needs_bbpred(4, 2, 2, nc)
    (boxes_rec, scores_rec, cls_rec), _, _ = run_protocol(program, (s1, c1), (s2, c2), spec)
    exp_boxes, exp_scores, exp_cls = oracle.bbpred_fp(
        CODEC.encode(features), centers0, 2, (conv, bn), CODEC
    )
    assert np.abs(CODEC.decode(boxes_rec) - exp_boxes).max() <= 5e-3
    assert np.abs(CODEC.decode(scores_rec) - exp_scores).max() <= 5e-3
    assert np.abs(CODEC.decode(cls_rec) - exp_cls).max() <= 5e-3
    probs = CODEC.decode(cls_rec)
    eps = 2.0**-CODEC.f
    assert (probs >= -eps).all() and (probs <= 1 + eps).all()


def test_anchor_config_validation():
    with pytest.raises(ValueError):
        AnchorConfig(cluster_count=0)
    with pytest.raises(ValueError):
        AnchorConfig(iters=0)
