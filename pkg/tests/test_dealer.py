import numpy as np
import pytest
from scipy import stats

from secdet import dealer
from secdet.errors import DealerError
from secdet.numeric import default_codec

CODEC = default_codec()
RING = CODEC.ring


def test_triples_reconstruct():
    b1, b2 = dealer.generate(0, {"triples": 10}, CODEC)
    t1 = b1.take_triples(10)
    t2 = b2.take_triples(10)
    a = RING.add(t1.a, t2.a)
    b = RING.add(t1.b, t2.b)
    c = RING.add(t1.c, t2.c)
    assert (c == RING.mul(a, b)).all()


def test_comp_masks_consistent():
    b1, b2 = dealer.generate(3, {"comp_masks": 200}, CODEC)
    m1 = b1.take("comp_masks", 200)
    m2 = b2.take("comp_masks", 200)
    s = RING.add(m1["s"], m2["s"])
    assert set(np.unique(s)) <= {0, 1}
    rho = RING.to_signed(RING.add(m1["rho"], m2["rho"]))
    # |rho| encodes r in [1, 2); sign tracks the bit
    mag = np.abs(rho).astype(np.float64) / CODEC.scale
    assert ((mag >= 1.0) & (mag < 2.0)).all()
    assert ((rho < 0) == (s == 1)).all()
    c = RING.add(m1["c"], m2["c"])
    a = RING.add(m1["a"], m2["a"])
    assert (c == RING.mul(a, RING.add(m1["rho"], m2["rho"]))).all()


def test_real_masks_quantized_consistent():
    b1, b2 = dealer.generate(4, {"real_masks": 500}, CODEC)
    m1 = b1.take("real_masks", 500)
    m2 = b2.take("real_masks", 500)
    rho = RING.add(m1["rho"], m2["rho"])
    r = m2["r"]
    assert np.allclose(CODEC.decode(rho), r, atol=0)  # dealer pre-quantizes r


def test_exp_and_div_material():
    b1, b2 = dealer.generate(5, {"exp_triples": 300, "div_masks": 300}, CODEC)
    e1 = b1.take("exp_triples", 300)
    e2 = b2.take("exp_triples", 300)
    t = e1["t"] + e2["t"]
    assert np.allclose(t * e1["s"] * e2["s"], 1.0, atol=1e-9)
    d1 = b1.take("div_masks", 300)["r"]
    d2 = b2.take("div_masks", 300)["r"]
    r = d1 + d2
    assert ((np.abs(r) >= 1.0) & (np.abs(r) < 2.0)).all()


def test_exhaustion():
    b1, _ = dealer.generate(6, {"triples": 5}, CODEC)
    b1.take("triples", 4)
    with pytest.raises(DealerError):
        b1.take("triples", 2)
    with pytest.raises(DealerError):
        b1.take("offsets", 1)


def test_files_deterministic(tmp_path):
    spec = {"triples": 50, "comp_masks": 20, "real_masks": 30, "offsets": 10}
    p1a, p2a = dealer.dealer_serve(42, spec, tmp_path / "a", CODEC)
    p1b, p2b = dealer.dealer_serve(42, spec, tmp_path / "b", CODEC)
    assert p1a.read_bytes() == p1b.read_bytes()
    assert p2a.read_bytes() == p2b.read_bytes()
    # different seed differs
    p1c, _ = dealer.dealer_serve(43, spec, tmp_path / "c", CODEC)
    assert p1a.read_bytes() != p1c.read_bytes()


def test_file_round_trip(tmp_path):
    spec = {"triples": 25, "exp_triples": 10}
    p1, p2 = dealer.dealer_serve(7, spec, tmp_path, CODEC)
    l1 = dealer.load_bundle(p1)
    l2 = dealer.load_bundle(p2)
    assert l1.party_id == 1 and l2.party_id == 2
    assert l1.codec.ring.p == RING.p and l1.codec.f == CODEC.f
    m1, m2 = dealer.generate(7, spec, CODEC)
    for kind in spec:
        for name in m1.arrays[kind]:
            assert np.array_equal(l1.arrays[kind][name], m1.arrays[kind][name])
            assert np.array_equal(l2.arrays[kind][name], m2.arrays[kind][name])


def test_triple_component_uniformity():
    b1, _ = dealer.generate(8, {"triples": 10_000}, CODEC)
    t = b1.take_triples(10_000)
    for arr in (t.a, t.b, t.c):
        counts, _ = np.histogram(arr.astype(np.float64), bins=64, range=(0, RING.p))
        _, pvalue = stats.chisquare(counts)
        assert pvalue > 0.01
