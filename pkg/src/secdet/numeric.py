"""Exact prime-field arithmetic and fixed-point encoding.

Every protocol in the toolkit computes over Z_p for a configured prime p.
Two kinds of moduli get a vectorized uint64 fast path:

* Mersenne primes 2^k - 1 with 32 <= k <= 61 (default 2^61 - 1), reduced
  by shift-and-fold;
* odd primes below 2^31, where a full product fits in uint64.

Reals are carried as fixed-point integers x_bar = round(x * 2^f) with
negatives wrapped into the upper half of [0, p).  A product of two encoded
values sits at scale 2^(2f) until truncated back to 2^f.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RangeError

__all__ = ["Ring", "FixedPointCodec", "default_codec", "is_prime"]

_MERSENNE_EXPONENTS = (13, 17, 19, 31, 61)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, valid for n < 2^64."""
    if n < 2:
        return False
    for q in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % q == 0:
            return n == q
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


class Ring:
    """Arithmetic mod a prime p on uint64 scalars and arrays.

    All element-wise operations accept array_like input and return uint64
    ndarrays; values are always kept in canonical form [0, p).
    """

    def __init__(self, p: int = (1 << 61) - 1):
        if not is_prime(p):
            raise ValueError(f"modulus {p} is not prime")
        self.p = p
        self._p64 = np.uint64(p)
        self._zero = np.uint64(0)
        k = p.bit_length()
        if p == (1 << k) - 1 and k in _MERSENNE_EXPONENTS:
            self._mersenne_k = k
        elif p < (1 << 31):
            self._mersenne_k = 0
        else:
            raise ValueError(
                "large moduli must be Mersenne primes 2^k-1 (k <= 61); "
                f"got {p}"
            )
        if self._mersenne_k:
            h = (k + 1) // 2
            self._h = np.uint64(h)
            self._lo_bits = np.uint64(k - h)
            self._mask_h = np.uint64((1 << h) - 1)
            self._mask_lo = np.uint64((1 << (k - h)) - 1)
            self._k = np.uint64(k)
            self._fold_shift = np.uint64(2 * h - k)

    # -- canonical helpers -------------------------------------------------

    def asarray(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.uint64)

    def add(self, a, b) -> np.ndarray:
        t = self.asarray(a) + self.asarray(b)
        return t - np.where(t >= self._p64, self._p64, self._zero)

    def sub(self, a, b) -> np.ndarray:
        t = self.asarray(a) + (self._p64 - self.asarray(b))
        return t - np.where(t >= self._p64, self._p64, self._zero)

    def neg(self, a) -> np.ndarray:
        a = self.asarray(a)
        return np.where(a == 0, a, self._p64 - a)

    def mul(self, a, b) -> np.ndarray:
        a = self.asarray(a)
        b = self.asarray(b)
        if not self._mersenne_k:
            return (a * b) % self._p64
        a1 = a >> self._h
        a0 = a & self._mask_h
        b1 = b >> self._h
        b0 = b & self._mask_h
        hi = a1 * b1
        mid = a1 * b0 + a0 * b1
        lo = a0 * b0
        # a*b = hi*2^(2h) + mid*2^h + lo with 2^k = 1 (mod p)
        t = (
            (hi << self._fold_shift)
            + (mid >> self._lo_bits)
            + ((mid & self._mask_lo) << self._h)
            + lo
        )
        t = (t >> self._k) + (t & self._p64)
        t = (t >> self._k) + (t & self._p64)
        return t - np.where(t >= self._p64, self._p64, self._zero)

    def inv(self, a: int) -> int:
        """Multiplicative inverse of a scalar (Fermat)."""
        a = int(a) % self.p
        if a == 0:
            raise ZeroDivisionError("0 has no inverse")
        return pow(a, self.p - 2, self.p)

    def rand(self, rng: np.random.Generator, shape=None) -> np.ndarray:
        """Uniform elements of [0, p)."""
        return rng.integers(0, self.p, size=shape, dtype=np.uint64)

    # -- signed view -------------------------------------------------------

    def to_signed(self, a) -> np.ndarray:
        """Interpret the upper half of [0, p) as negatives (int64)."""
        a = self.asarray(a)
        half = np.uint64(self.p // 2)
        out = np.where(a > half, -((self._p64 - a).astype(np.int64)), a.astype(np.int64))
        return out

    def from_signed(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.int64)
        mag = np.abs(v).astype(np.uint64)
        return np.where(v < 0, self._p64 - mag, mag)


@dataclass(frozen=True)
class FixedPointCodec:
    """Fixed-point parameters: f fractional bits, 2^l magnitude bound, ring.

    The defaults leave 2^(2f+l+1) well below p so one full-scale product can
    sit un-truncated, with enough slack above it that the share-local
    probabilistic truncation misfires with negligible probability.
    """

    ring: Ring
    f: int = 15
    l: int = 20

    def __post_init__(self):
        if 1 << (2 * self.f + self.l + 1) >= self.ring.p:
            raise ValueError("need 2^(2f+l+1) < p for one product before truncation")

    @property
    def scale(self) -> int:
        return 1 << self.f

    def encode(self, x) -> np.ndarray:
        """round(x * 2^f) wrapped into [0, p); raises RangeError past 2^l."""
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise RangeError("non-finite value cannot be encoded")
        if np.any(np.abs(x) >= (1 << self.l)):
            raise RangeError(f"magnitude exceeds 2^{self.l}")
        v = np.round(x * self.scale).astype(np.int64)
        return self.ring.from_signed(v)

    def decode(self, e, scale_bits: int | None = None) -> np.ndarray:
        """Signed interpretation divided by 2^f (or a caller-given scale)."""
        s = self.f if scale_bits is None else scale_bits
        return self.ring.to_signed(e).astype(np.float64) / float(1 << s)

    def encode_int(self, x: float, scale_bits: int) -> int:
        """Scalar encoding at an explicit scale (e.g. 2f for a bias)."""
        v = int(round(float(x) * (1 << scale_bits)))
        if abs(v) >= self.ring.p // 2:
            raise RangeError("scaled value exceeds field capacity")
        return v % self.ring.p

    # -- truncation ---------------------------------------------------------

    def trunc_share(self, e, party_id: int) -> np.ndarray:
        """Share-local division by 2^f after a multiplication.

        Party 1 floor-divides its share; party 2 floor-divides the negation
        and re-negates.  Reconstruction lands within 1 ulp of the true
        product encoding except when party 1's share falls inside a window
        of width |value| next to the wrap boundary, which has probability
        |value| / p for uniformly random shares.
        """
        e = self.ring.asarray(e)
        uf = np.uint64(self.f)
        if party_id == 1:
            return e >> uf
        return self.ring.neg(self.ring.neg(e) >> uf)

    def trunc_exact(self, e) -> np.ndarray:
        """Plaintext-oracle truncation: signed floor division by 2^f."""
        v = self.ring.to_signed(e) >> np.int64(self.f)
        return self.ring.from_signed(v)


def default_codec(p: int = (1 << 61) - 1, f: int = 15, l: int = 20) -> FixedPointCodec:
    return FixedPointCodec(ring=Ring(p), f=f, l=l)
