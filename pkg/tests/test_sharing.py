import numpy as np
import pytest
from scipy import stats

from secdet.errors import (
    DomainMismatchError,
    InsufficientPartiesError,
    InsufficientSharesError,
)
from secdet.numeric import Ring
from secdet.sharing import (
    FIELD,
    REAL,
    Share,
    SharedTensor,
    mul_grr,
    reconstruct_additive,
    reconstruct_tensor,
    shamir_reconstruct,
    shamir_share,
    split_additive,
    split_tensor,
)

RING = Ring()


def test_split_additive_round_trip():
    rng = np.random.default_rng(0)
    for x in (0, 42, 17, RING.p - 1):
        s1, s2 = split_additive(x, RING, rng)
        assert reconstruct_additive(s1, s2, RING) == x


def test_split_additive_uniform_marginal():
    rng = np.random.default_rng(1)
    x = np.full(100_000, 5, dtype=np.uint64)
    t1, _ = split_tensor(x, RING, rng)
    # bin party 1's shares over [0, p): uniformity chi-square
    counts, _ = np.histogram(t1.data.astype(np.float64), bins=64, range=(0, RING.p))
    _, pvalue = stats.chisquare(counts)
    assert pvalue > 0.01


def test_reconstruct_examples():
    s1 = Share(1, FIELD, 3)
    s2 = Share(2, FIELD, RING.p - 3)
    assert reconstruct_additive(s1, s2, RING) == 0
    r1 = Share(1, REAL, 2.5 - 0.75)
    r2 = Share(2, REAL, 0.75)
    assert abs(reconstruct_additive(r1, r2, RING) - 2.5) <= 2**-45


def test_domain_mismatch_rejected():
    with pytest.raises(DomainMismatchError):
        reconstruct_additive(Share(1, FIELD, 1), Share(2, REAL, 1.0), RING)
    with pytest.raises(DomainMismatchError):
        SharedTensor(1, FIELD, np.zeros(3))  # float payload in field domain


def test_tensor_round_trip():
    rng = np.random.default_rng(2)
    x = RING.rand(rng, (4, 5))
    t1, t2 = split_tensor(x, RING, rng)
    assert (reconstruct_tensor(t1, t2, RING) == x).all()


def test_shamir_basic():
    rng = np.random.default_rng(3)
    shares = shamir_share(7, t=1, n=3, ring=RING, rng=rng)
    for pair in ((0, 1), (0, 2), (1, 2)):
        assert shamir_reconstruct([shares[pair[0]], shares[pair[1]]], RING) == 7
    # degenerate threshold: constant polynomial
    const = shamir_share(9, t=0, n=4, ring=RING, rng=rng)
    assert all(int(s.value) == 9 for s in const)


def test_shamir_insufficient_shares():
    rng = np.random.default_rng(4)
    shares = shamir_share(5, t=2, n=5, ring=RING, rng=rng)
    with pytest.raises(InsufficientSharesError):
        shamir_reconstruct(shares[:2], RING)


def test_shamir_single_share_uniform():
    rng = np.random.default_rng(5)
    vals = shamir_share(np.full(10_000, 123, dtype=np.uint64), t=1, n=3, ring=RING, rng=rng)
    counts, _ = np.histogram(np.asarray(vals[0].value, dtype=np.float64), bins=50, range=(0, RING.p))
    _, pvalue = stats.chisquare(counts)
    assert pvalue > 0.01


def test_mul_grr_examples():
    rng = np.random.default_rng(6)
    xs = shamir_share(5, t=1, n=3, ring=RING, rng=rng)
    ys = shamir_share(6, t=1, n=3, ring=RING, rng=rng)
    prod = mul_grr(xs, ys, RING, rng)
    assert shamir_reconstruct(prod[:2], RING) == 30
    assert all(s.threshold == 1 for s in prod)

    # identity: x * 1 == x
    ones = shamir_share(1, t=1, n=3, ring=RING, rng=rng)
    xs2 = shamir_share(777, t=1, n=3, ring=RING, rng=rng)
    assert shamir_reconstruct(mul_grr(xs2, ones, RING, rng)[1:], RING) == 777


def test_mul_grr_needs_enough_parties():
    rng = np.random.default_rng(7)
    xs = shamir_share(5, t=1, n=2, ring=RING, rng=rng)
    ys = shamir_share(6, t=1, n=2, ring=RING, rng=rng)
    with pytest.raises(InsufficientPartiesError):
        mul_grr(xs, ys, RING, rng)


def test_mul_grr_random_against_plain():
    rng = np.random.default_rng(8)
    for _ in range(50):
        x = int(RING.rand(rng))
        y = int(RING.rand(rng))
        xs = shamir_share(x, t=1, n=3, ring=RING, rng=rng)
        ys = shamir_share(y, t=1, n=3, ring=RING, rng=rng)
        got = shamir_reconstruct(mul_grr(xs, ys, RING, rng), RING)
        assert got == x * y % RING.p
