"""Foundational interactive protocols: multiplication, conversion, secure
exponentiation / division / comparison.

All functions are written from one party's point of view and run
symmetrically on both: they take the party context plus this party's share
arrays and return this party's output shares.  Flat uint64 arrays carry
field shares; float64 arrays carry masked-real shares.  Openings are the
only values that ever cross the wire and each carries a leakage tag that
the transcript records.
"""

from __future__ import annotations

import numpy as np

from .errors import DivisionByZeroError, RangeError, TripleReuseError
from .sharing import REAL_VALUE_BOUND, FieldTriple
from .transport import PartyCtx

# Near-zero threshold for an opened masked denominator.
DIV_ZERO_EPS = 1e-7

# Opened values each protocol is allowed to put on the wire; the test
# harness checks transcripts against this profile.
LEAKAGE_PROFILE = {
    "mul": {"mul.de"},
    "to_real": {"to_real.masked"},
    "exp": {"to_real.masked", "exp.scaled"},
    "divi": {"to_real.masked", "mul.real.de", "divi.w"},
    "comp": {"comp.e", "comp.m"},
    "reconstruct": {"output.reconstruct"},
}


# -- field multiplication -------------------------------------------------------


def mul_beaver(ctx: PartyCtx, x, y, triple: FieldTriple | None = None, scaled: bool = True):
    """Share product via one Beaver triple batch; one round of masked opens.

    With ``scaled`` the operands are fixed-point encodings and the result is
    truncated back to scale 2^f; without it the product keeps the operands'
    combined scale (used for bit-times-value selections, which are exact).
    """
    ring = ctx.ring
    x = ring.asarray(x)
    y = ring.asarray(y)
    n = x.size
    if triple is None:
        triple = ctx.bundle.take_triples(n)
    if triple.consumed:
        raise TripleReuseError(f"triple {triple.triple_id} was already consumed")
    triple.consumed = True
    a = triple.a.reshape(x.shape)
    b = triple.b.reshape(x.shape)
    c = triple.c.reshape(x.shape)

    masked = np.concatenate([ring.sub(x, a).ravel(), ring.sub(y, b).ravel()])
    opened = ctx.open_field(masked, "mul.de")
    d = opened[:n].reshape(x.shape)
    e = opened[n:].reshape(x.shape)

    z = ring.add(c, ring.mul(d, b))
    z = ring.add(z, ring.mul(e, a))
    if ctx.party_id == 1:
        z = ring.add(z, ring.mul(d, e))
    if scaled:
        z = ctx.codec.trunc_share(z, ctx.party_id)
    return z


def select(ctx: PartyCtx, bit, x, y):
    """y + bit*(x - y): returns x where the shared bit is 1, else y.

    The bit is an integer-scale sharing of {0,1}, so the product needs no
    truncation and the selection is exact.
    """
    diff = ctx.ring.sub(x, y)
    return ctx.ring.add(y, mul_beaver(ctx, bit, diff, scaled=False))


# -- domain conversion ------------------------------------------------------------


def to_masked_real(ctx: PartyCtx, x) -> np.ndarray:
    """Field shares -> masked-real shares (one flight toward party 1).

    Parties add a dealer-shared mask encoding and reveal the sum to party 1,
    which learns value + r; party 2 holds -r.  The mask is uniform over
    [-C, C], so the revealed value is only statistically hidden; callers are
    responsible for the |value| <= B semantic bound.
    """
    ring = ctx.ring
    x = ring.asarray(x)
    pack = ctx.bundle.take("real_masks", x.size)
    z = ring.add(x, pack["rho"].reshape(x.shape))
    opened = ctx.reveal_to_party(z, target=1, tag="to_real.masked")
    if ctx.party_id == 1:
        return ctx.codec.decode(opened)
    return -pack["r"].reshape(x.shape)


def to_field(ctx: PartyCtx, u) -> np.ndarray:
    """Masked-real shares -> field shares by local re-encoding (zero rounds)."""
    return ctx.codec.encode(u)


# -- real-domain multiplication ----------------------------------------------------


def real_mul(ctx: PartyCtx, pairs) -> list:
    """Beaver products over additively shared reals; all opens in one flight.

    ``pairs`` is a list of (x, y) float64 share arrays of equal shape per
    pair.  Masks come from dealer real triples; float64 keeps the absolute
    error near machine precision because every operand is magnitude-bounded.
    """
    xs = [np.asarray(x, dtype=np.float64) for x, _ in pairs]
    ys = [np.asarray(y, dtype=np.float64) for _, y in pairs]
    triples = [ctx.bundle.take("real_triples", x.size) for x in xs]
    masked = np.concatenate(
        [
            np.concatenate(
                [
                    (x.ravel() - t["a"]),
                    (y.ravel() - t["b"]),
                ]
            )
            for x, y, t in zip(xs, ys, triples)
        ]
    )
    opened = ctx.open_real(masked, "mul.real.de")
    outs = []
    off = 0
    for x, y, t in zip(xs, ys, triples):
        n = x.size
        d = opened[off : off + n]
        e = opened[off + n : off + 2 * n]
        off += 2 * n
        z = t["c"] + d * t["b"] + e * t["a"]
        if ctx.party_id == 1:
            z = z + d * e
        outs.append(z.reshape(x.shape))
    return outs


# -- secure exponentiation ----------------------------------------------------------


def sec_exp(ctx: PartyCtx, x, field_input: bool = True) -> np.ndarray:
    """Masked-real shares of e^value for a field (or masked-real) sharing.

    Each party exponentiates its real share locally; the two multiplicative
    pieces e^(u1) * e^(u2) are recombined into an additive sharing through
    dealer scales s1, s2 and shares of 1/(s1*s2), costing one simultaneous
    exchange of scaled values.
    """
    with ctx.begin("exp"):
        u = to_masked_real(ctx, x) if field_input else np.asarray(x, dtype=np.float64)
        local = np.exp(u)
        if not np.all(np.isfinite(local)):
            raise RangeError("local exponential overflowed binary64")
        tr = ctx.bundle.take("exp_triples", u.size)
        scaled = local.ravel() * tr["s"]
        other = ctx.exchange(scaled)
        ctx.note_open("exp.scaled")
        m = scaled * other  # = e^u * s1 * s2, known to both
        return (m * tr["t"]).reshape(u.shape)


# -- secure division ------------------------------------------------------------------


def _divi_core(ctx: PartyCtx, num_real, den_real, num_is_one: bool = False,
               zero_map: bool = False):
    """Masked-denominator division on masked-real shares.

    Multiplies the denominator by a dealer-shared signed scale r, opens
    w = r*den (the only leak: a multiplicatively masked magnitude), then
    forms 1/den as [r]/w locally and multiplies by the numerator.  With
    ``zero_map`` a (publicly visible) near-zero denominator yields quotient
    shares of 0 instead of an error.
    """
    den = np.asarray(den_real, dtype=np.float64)
    r = ctx.bundle.take("div_masks", den.size)["r"].reshape(den.shape)
    (w_shares,) = real_mul(ctx, [(r, den)])
    w = ctx.open_real(w_shares, "divi.w")
    degenerate = np.abs(w) < DIV_ZERO_EPS
    if np.any(degenerate):
        if not zero_map:
            raise DivisionByZeroError("opened masked denominator is zero")
        w = np.where(degenerate, 1.0, w)
    inv_den = r / w  # shares of 1/den
    if num_is_one:
        y = inv_den
    else:
        (y,) = real_mul(ctx, [(np.asarray(num_real, dtype=np.float64), inv_den)])
    if zero_map:
        return np.where(degenerate, 0.0, y), degenerate
    return y


def sec_divi(ctx: PartyCtx, num, den, field_output: bool = True):
    """Share quotient num/den from field sharings of both operands."""
    with ctx.begin("divi"):
        ring = ctx.ring
        both = to_masked_real(
            ctx, np.concatenate([ring.asarray(num).ravel(), ring.asarray(den).ravel()])
        )
        n = np.asarray(num).size
        y = _divi_core(ctx, both[:n].reshape(np.shape(num)), both[n:].reshape(np.shape(den)))
        return to_field(ctx, y) if field_output else y


# -- secure comparison -----------------------------------------------------------------


def sec_comp(ctx: PartyCtx, a, b) -> np.ndarray:
    """Shares of 1{a < b}; equality gives 0 (the >= branch wins).

    The difference is multiplied in the field by a dealer scale
    rho = enc(r) * (1-2s), r in [1,2), via a Beaver pair specialized to rho,
    and the masked product m is opened.  Its public sign g satisfies
    g = 1{a<b} XOR s, so f = g + (1-2g)*s is assembled share-locally.  Field
    arithmetic is exact, so comparisons are correct whenever the encodings
    differ; an opened m of exactly zero publicly marks a tie, which yields 0.
    """
    with ctx.begin("comp"):
        ring = ctx.ring
        a = ring.asarray(a)
        d = ring.sub(a, ring.asarray(b))
        cm = ctx.bundle.take("comp_masks", d.size)
        s = cm["s"].reshape(d.shape)
        rho = cm["rho"].reshape(d.shape)
        ta = cm["a"].reshape(d.shape)
        tc = cm["c"].reshape(d.shape)

        e = ctx.open_field(ring.sub(d, ta), "comp.e")
        m_share = ring.add(tc, ring.mul(e, rho))
        m = ctx.open_field(m_share, "comp.m")

        g = (ring.to_signed(m) < 0).astype(np.uint64)
        flipped = np.where(g == 1, ring.neg(s), s)
        if ctx.party_id == 1:
            f = ring.add(g, flipped)
        else:
            f = flipped
        # a tie (m == 0) is public; both parties hold a trivial sharing of 0
        return np.where(m == 0, np.uint64(0), f)


# -- reconstruction program ----------------------------------------------------------


def reconstruct(ctx: PartyCtx, share):
    """Open an output sharing to both parties (one simultaneous round)."""
    with ctx.begin("reconstruct"):
        return ctx.open_field(share, "output.reconstruct")


# -- dealer sizing --------------------------------------------------------------------


def needs_mul(n: int) -> dict:
    return {"triples": n}


def needs_to_real(n: int) -> dict:
    return {"real_masks": n}


def needs_exp(n: int, field_input: bool = True) -> dict:
    out = {"exp_triples": n}
    if field_input:
        out["real_masks"] = n
    return out


def needs_divi(n: int) -> dict:
    return {"real_masks": 2 * n, "div_masks": n, "real_triples": 2 * n}


def needs_comp(n: int) -> dict:
    return {"comp_masks": n}
