"""Secret sharing schemes and share containers.

Field shares are uniformly random elements of Z_p that sum to the secret;
masked-real shares are binary64 reals that sum to a bounded value, used only
where a protocol must exponentiate or divide locally.  Shamir shares and the
degree-reduction product live here as a multi-party library feature; the
two-party online path multiplies through dealer triples instead (see
``secdet.protocols``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainMismatchError,
    InsufficientPartiesError,
    InsufficientSharesError,
    ShapeError,
)
from .numeric import FixedPointCodec, Ring

FIELD = "field"
REAL = "masked-real"


@dataclass
class Share:
    """One party's piece of a secret scalar."""

    party_id: int
    domain: str
    value: object  # int in [0, p) for field, float for masked-real

    def __post_init__(self):
        if self.domain not in (FIELD, REAL):
            raise DomainMismatchError(f"unknown share domain {self.domain!r}")


@dataclass
class SharedTensor:
    """One party's share of an n-dimensional secret array.

    ``data`` is uint64 for the field domain and float64 for masked-real;
    its shape is authoritative.
    """

    party_id: int
    domain: str
    data: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __post_init__(self):
        want = np.uint64 if self.domain == FIELD else np.float64
        if self.data.dtype != want:
            raise DomainMismatchError(
                f"{self.domain} tensor requires {want.__name__} payload"
            )

    def reshape(self, shape) -> "SharedTensor":
        return SharedTensor(self.party_id, self.domain, self.data.reshape(shape))


# -- additive sharing --------------------------------------------------------


def split_additive(x, ring: Ring, rng: np.random.Generator):
    """Split a field element into two uniformly random summands mod p."""
    x = ring.asarray(x)
    s1 = ring.rand(rng, x.shape if x.shape else None)
    s2 = ring.sub(x, s1)
    return (
        Share(1, FIELD, int(s1) if s1.shape == () else s1),
        Share(2, FIELD, int(s2) if s2.shape == () else s2),
    )


def reconstruct_additive(s1: Share, s2: Share, ring: Ring):
    if s1.domain != s2.domain:
        raise DomainMismatchError(
            f"cannot combine {s1.domain} share with {s2.domain} share"
        )
    if s1.domain == REAL:
        return float(np.asarray(s1.value) + np.asarray(s2.value))
    out = ring.add(s1.value, s2.value)
    return int(out) if out.shape == () else out


def split_tensor(values, ring: Ring, rng: np.random.Generator):
    """Additively share a uint64 array; returns one SharedTensor per party."""
    values = ring.asarray(values)
    s1 = ring.rand(rng, values.shape)
    s2 = ring.sub(values, s1)
    return SharedTensor(1, FIELD, s1), SharedTensor(2, FIELD, s2)


def reconstruct_tensor(t1: SharedTensor, t2: SharedTensor, ring: Ring) -> np.ndarray:
    if t1.domain != t2.domain:
        raise DomainMismatchError("tensor domains differ")
    if t1.shape != t2.shape:
        raise ShapeError(f"share shapes differ: {t1.shape} vs {t2.shape}")
    if t1.domain == REAL:
        return t1.data + t2.data
    return ring.add(t1.data, t2.data)


# -- masked-real domain -------------------------------------------------------

# Semantic bound on values entering the masked-real domain, and the uniform
# mask half-width.  Values stay small enough that float64 keeps ~1e-12
# absolute error; privacy in this domain is bounded-statistical only.
REAL_VALUE_BOUND = 16.0
REAL_MASK_BOUND = 64.0


def mask_real_pair(u: float, r: float):
    """Local algebra of a masked-real sharing: (u - r, r) -> sums to u."""
    return Share(1, REAL, float(u) - float(r)), Share(2, REAL, float(r))


def encode_real_shares(t: SharedTensor, codec: FixedPointCodec) -> SharedTensor:
    """Re-encode masked-real shares into the field (local, per party)."""
    if t.domain != REAL:
        raise DomainMismatchError("expected masked-real shares")
    return SharedTensor(t.party_id, FIELD, codec.encode(t.data))


# -- Shamir sharing and degree reduction --------------------------------------


@dataclass
class ShamirPolynomialShare:
    """Evaluation f(index) of a secret polynomial with f(0) = secret."""

    index: int
    value: object  # uint64 scalar or array
    threshold: int


def shamir_share(x, t: int, n: int, ring: Ring, rng: np.random.Generator):
    """Degree-t polynomial sharing of x across evaluation points 1..n."""
    if n < t + 1:
        raise InsufficientSharesError(f"n={n} cannot reach threshold t={t}")
    x = ring.asarray(x)
    coeffs = [x] + [ring.rand(rng, x.shape if x.shape else None) for _ in range(t)]
    shares = []
    for i in range(1, n + 1):
        acc = ring.asarray(np.zeros_like(x))
        for c in reversed(coeffs):  # Horner
            acc = ring.add(ring.mul(acc, np.uint64(i)), c)
        shares.append(ShamirPolynomialShare(i, acc, t))
    return shares


def lagrange_at_zero(indices, ring: Ring):
    """Interpolation weights lambda_i so that sum lambda_i * f(i) = f(0)."""
    coeffs = []
    for i in indices:
        num, den = 1, 1
        for j in indices:
            if j == i:
                continue
            num = num * (-j) % ring.p
            den = den * (i - j) % ring.p
        coeffs.append(num * ring.inv(den) % ring.p)
    return coeffs


def shamir_reconstruct(shares, ring: Ring):
    """Recover f(0) from any t+1 distinct shares by Lagrange interpolation."""
    if not shares:
        raise InsufficientSharesError("no shares given")
    t = shares[0].threshold
    if len(shares) < t + 1:
        raise InsufficientSharesError(f"need {t + 1} shares, got {len(shares)}")
    use = shares[: t + 1]
    indices = [s.index for s in use]
    if len(set(indices)) != len(indices):
        raise InsufficientSharesError("duplicate evaluation indices")
    lam = lagrange_at_zero(indices, ring)
    acc = ring.asarray(np.zeros_like(ring.asarray(use[0].value)))
    for coeff, s in zip(lam, use):
        acc = ring.add(acc, ring.mul(np.uint64(coeff), s.value))
    return int(acc) if acc.shape == () else acc


def mul_grr(xs, ys, ring: Ring, rng: np.random.Generator):
    """Degree-reduction product of two Shamir sharings.

    Each of the n >= 2t+1 parties multiplies its shares locally (degree 2t),
    re-shares the product with a fresh degree-t polynomial, and combines the
    received sub-shares with the Lagrange weights of the full index set.  The
    result is a degree-t sharing of x*y.
    """
    if len(xs) != len(ys):
        raise InsufficientPartiesError("mismatched share lists")
    t = xs[0].threshold
    n = len(xs)
    if n < 2 * t + 1:
        raise InsufficientPartiesError(f"need n >= {2 * t + 1} parties, got {n}")
    indices = [s.index for s in xs]
    if indices != [s.index for s in ys]:
        raise InsufficientPartiesError("share index sets differ")
    lam = lagrange_at_zero(indices, ring)

    # sub_shares[i][j]: party i's re-sharing of h_i = x_i * y_i, sent to j
    sub_shares = []
    for xi, yi in zip(xs, ys):
        h_i = ring.mul(ring.asarray(xi.value), ring.asarray(yi.value))
        sub_shares.append(shamir_share(h_i, t, n, ring, rng))

    out = []
    for j in range(n):
        acc = ring.asarray(np.zeros_like(ring.asarray(xs[0].value)))
        for lam_i, resh in zip(lam, sub_shares):
            acc = ring.add(acc, ring.mul(np.uint64(lam_i), resh[j].value))
        out.append(ShamirPolynomialShare(indices[j], acc, t))
    return out


# -- Beaver algebra ------------------------------------------------------------

# The interactive two-party multiplication lives in secdet.protocols; the
# pure combination step is shared with the dealer tests.


@dataclass
class FieldTriple:
    """One party's share of a multiplication triple (a, b, c = a*b)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    triple_id: int = field(default=-1)
    consumed: bool = field(default=False, compare=False)


def beaver_combine(ring: Ring, party_id: int, triple: FieldTriple, d, e):
    """Local share of x*y from opened maskings d = x-a, e = y-b."""
    z = ring.add(triple.c, ring.mul(d, triple.b))
    z = ring.add(z, ring.mul(e, triple.a))
    if party_id == 1:
        z = ring.add(z, ring.mul(d, e))
    return z
