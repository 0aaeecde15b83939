"""Trusted-dealer correlated randomness: generation, bundles, file format.

The dealer runs strictly offline.  ``generate`` derives every value from one
seed, splits each secret between the two parties, and never touches input
data (there is no data-plane entry point here at all).  Bundles can be held
in memory or serialized to one binary file per party; serialization is
deterministic, so identical seeds yield byte-identical files.

Randomness kinds
----------------
triples       field Beaver triples (a, b, c = a*b)
comp_masks    comparison material: bit s, scale rho = enc(r)*(1-2s) with
              r in [1, 2), plus a Beaver pair (a, c = a*rho) specialized to rho
offsets       field offsets from a wrap-safe central range (sorting, box
              prediction, empty-cluster fallback)
real_masks    field-shared encoding of a real mask r in [-C, C]; party 2
              additionally holds r itself (field -> masked-real conversion)
real_triples  additive real Beaver triples with masks in [-C, C]
div_masks     additive real shares of a signed scale r, |r| in [1, 2)
exp_triples   multiplicative real scales s1 (party 1), s2 (party 2) and
              additive real shares of 1/(s1*s2)
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DealerError
from .numeric import FixedPointCodec, default_codec
from .sharing import REAL_MASK_BOUND, FieldTriple

MAGIC = b"SDBL"
VERSION = 1

KINDS = (
    "triples",
    "comp_masks",
    "offsets",
    "box_offsets",
    "real_masks",
    "real_triples",
    "div_masks",
    "exp_triples",
)

_U64, _F64 = 0, 1


@dataclass
class PartyBundle:
    """One party's correlated randomness with per-kind consumption cursors."""

    party_id: int
    seed: int
    codec: FixedPointCodec
    arrays: dict  # kind -> {name: np.ndarray}
    cursors: dict = field(default_factory=dict)

    def counts(self) -> dict:
        out = {}
        for kind, named in self.arrays.items():
            first = next(iter(named.values()))
            out[kind] = len(first)
        return out

    def remaining(self, kind: str) -> int:
        return self.counts().get(kind, 0) - self.cursors.get(kind, 0)

    def take(self, kind: str, n: int) -> dict:
        """Consume n items of a kind; never rewinds."""
        if kind not in self.arrays:
            raise DealerError(f"bundle holds no {kind!r}")
        start = self.cursors.get(kind, 0)
        named = self.arrays[kind]
        total = len(next(iter(named.values())))
        if start + n > total:
            raise DealerError(
                f"dealer randomness exhausted: {kind} has {total - start} left, "
                f"{n} requested"
            )
        self.cursors[kind] = start + n
        return {name: arr[start : start + n] for name, arr in named.items()}

    def take_triples(self, n: int) -> FieldTriple:
        start = self.cursors.get("triples", 0)
        got = self.take("triples", n)
        return FieldTriple(got["a"], got["b"], got["c"], triple_id=start)


def _split_field(ring, rng, values):
    s1 = ring.rand(rng, values.shape)
    return s1, ring.sub(values, s1)


def generate(seed: int, spec: dict, codec: FixedPointCodec | None = None):
    """Produce both parties' bundles from one seed.

    ``spec`` maps kind names to counts; unspecified kinds are omitted.
    """
    codec = codec or default_codec()
    ring = codec.ring
    rng = np.random.default_rng(np.random.PCG64(seed))
    p1: dict = {}
    p2: dict = {}
    C = REAL_MASK_BOUND

    for kind in KINDS:
        n = int(spec.get(kind, 0))
        if n <= 0:
            continue
        if kind == "triples":
            a = ring.rand(rng, n)
            b = ring.rand(rng, n)
            c = ring.mul(a, b)
            a1, a2 = _split_field(ring, rng, a)
            b1, b2 = _split_field(ring, rng, b)
            c1, c2 = _split_field(ring, rng, c)
            p1[kind] = {"a": a1, "b": b1, "c": c1}
            p2[kind] = {"a": a2, "b": b2, "c": c2}
        elif kind == "comp_masks":
            s = rng.integers(0, 2, n, dtype=np.uint64)
            r = rng.uniform(1.0, 2.0, n)
            r_enc = np.round(r * codec.scale).astype(np.uint64)
            rho = np.where(s == 0, r_enc, ring.neg(r_enc))
            a = ring.rand(rng, n)
            c = ring.mul(a, rho)
            s1, s2 = _split_field(ring, rng, s)
            rho1, rho2 = _split_field(ring, rng, rho)
            a1, a2 = _split_field(ring, rng, a)
            c1, c2 = _split_field(ring, rng, c)
            p1[kind] = {"s": s1, "rho": rho1, "a": a1, "c": c1}
            p2[kind] = {"s": s2, "rho": rho2, "a": a2, "c": c2}
        elif kind == "offsets":
            # central range keeps offset +/- any in-range encoding unwrapped
            margin = 1 << (codec.f + codec.l + 1)
            o = rng.integers(margin, ring.p - margin, n, dtype=np.uint64)
            o1, o2 = _split_field(ring, rng, o)
            p1[kind] = {"o": o1}
            p2[kind] = {"o": o2}
        elif kind == "box_offsets":
            # value-scale offsets for box-prediction masking and fallbacks
            o = codec.encode(rng.uniform(0.5, 63.5, n))
            o1, o2 = _split_field(ring, rng, o)
            p1[kind] = {"o": o1}
            p2[kind] = {"o": o2}
        elif kind == "real_masks":
            r = rng.uniform(-C, C, n)
            r_q = np.round(r * codec.scale) / codec.scale  # dealer pre-quantizes
            rho = codec.encode(r_q)
            rho1, rho2 = _split_field(ring, rng, rho)
            p1[kind] = {"rho": rho1}
            p2[kind] = {"rho": rho2, "r": r_q}
        elif kind == "real_triples":
            a = rng.uniform(-C, C, n)
            b = rng.uniform(-C, C, n)
            c = a * b
            a1 = rng.uniform(-C, C, n)
            b1 = rng.uniform(-C, C, n)
            c1 = rng.uniform(-C * C, C * C, n)
            p1[kind] = {"a": a1, "b": b1, "c": c1}
            p2[kind] = {"a": a - a1, "b": b - b1, "c": c - c1}
        elif kind == "div_masks":
            r = rng.uniform(1.0, 2.0, n) * np.where(rng.integers(0, 2, n) == 0, 1.0, -1.0)
            eta = rng.uniform(-1.0, 2.0, n)
            r1 = r * eta
            p1[kind] = {"r": r1}
            p2[kind] = {"r": r - r1}
        elif kind == "exp_triples":
            s1v = rng.uniform(0.5, 2.0, n)
            s2v = rng.uniform(0.5, 2.0, n)
            t = 1.0 / (s1v * s2v)
            eta = rng.uniform(-1.0, 2.0, n)
            t1 = t * eta
            p1[kind] = {"s": s1v, "t": t1}
            p2[kind] = {"s": s2v, "t": t - t1}

    return (
        PartyBundle(1, seed, codec, p1),
        PartyBundle(2, seed, codec, p2),
    )


# -- binary file format --------------------------------------------------------


def save_bundle(bundle: PartyBundle, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(
        struct.pack(
            "<HHQIIQI",
            VERSION,
            bundle.party_id,
            bundle.codec.ring.p,
            bundle.codec.f,
            bundle.codec.l,
            bundle.seed,
            len(bundle.arrays),
        )
    )
    for kind in sorted(bundle.arrays):
        named = bundle.arrays[kind]
        count = len(next(iter(named.values())))
        kb = kind.encode()
        buf.write(struct.pack("<H", len(kb)))
        buf.write(kb)
        buf.write(struct.pack("<HQ", len(named), count))
        for name in sorted(named):
            arr = named[name]
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", _U64 if arr.dtype == np.uint64 else _F64))
            buf.write(arr.astype("<u8" if arr.dtype == np.uint64 else "<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_bundle(path) -> PartyBundle:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DealerError(f"{path}: not a dealer bundle")
    off = 4
    version, party, p, f, l, seed, n_kinds = struct.unpack_from("<HHQIIQI", raw, off)
    off += struct.calcsize("<HHQIIQI")
    if version != VERSION:
        raise DealerError(f"unsupported bundle version {version}")
    codec = default_codec(p=p, f=f, l=l)
    arrays: dict = {}
    for _ in range(n_kinds):
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        kind = raw[off : off + klen].decode()
        off += klen
        n_arrays, count = struct.unpack_from("<HQ", raw, off)
        off += struct.calcsize("<HQ")
        named = {}
        for _ in range(n_arrays):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode()
            off += nlen
            (dt,) = struct.unpack_from("<B", raw, off)
            off += 1
            nbytes = count * 8
            flat = np.frombuffer(raw[off : off + nbytes], dtype="<u8" if dt == _U64 else "<f8")
            named[name] = flat.astype(np.uint64 if dt == _U64 else np.float64)
            off += nbytes
        arrays[kind] = named
    return PartyBundle(party, seed, codec, arrays)


def generate_trivial(spec: dict, codec: FixedPointCodec | None = None):
    """Bundles with all masking set to identity values (zero offsets, unit
    scales).  Protocols stay correct but hide nothing; used to check that
    secure control flow reproduces plaintext behaviour exactly."""
    codec = codec or default_codec()
    one = np.uint64(codec.scale)
    p1: dict = {}
    p2: dict = {}

    def zeros(n):
        return np.zeros(n, dtype=np.uint64)

    def fzeros(n):
        return np.zeros(n, dtype=np.float64)

    for kind, n in spec.items():
        n = int(n)
        if kind == "triples":
            p1[kind] = {"a": zeros(n), "b": zeros(n), "c": zeros(n)}
            p2[kind] = {"a": zeros(n), "b": zeros(n), "c": zeros(n)}
        elif kind == "comp_masks":
            p1[kind] = {"s": zeros(n), "rho": np.full(n, one), "a": zeros(n), "c": zeros(n)}
            p2[kind] = {"s": zeros(n), "rho": zeros(n), "a": zeros(n), "c": zeros(n)}
        elif kind in ("offsets", "box_offsets"):
            p1[kind] = {"o": zeros(n)}
            p2[kind] = {"o": zeros(n)}
        elif kind == "real_masks":
            p1[kind] = {"rho": zeros(n)}
            p2[kind] = {"rho": zeros(n), "r": fzeros(n)}
        elif kind == "real_triples":
            p1[kind] = {"a": fzeros(n), "b": fzeros(n), "c": fzeros(n)}
            p2[kind] = {"a": fzeros(n), "b": fzeros(n), "c": fzeros(n)}
        elif kind == "div_masks":
            p1[kind] = {"r": np.ones(n)}
            p2[kind] = {"r": fzeros(n)}
        elif kind == "exp_triples":
            p1[kind] = {"s": np.ones(n), "t": np.ones(n)}
            p2[kind] = {"s": np.ones(n), "t": fzeros(n)}
    return PartyBundle(1, -1, codec, p1), PartyBundle(2, -1, codec, p2)


def dealer_serve(seed: int, spec: dict, out_dir, codec: FixedPointCodec | None = None):
    """Write one bundle file per party; returns the two paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b1, b2 = generate(seed, spec, codec)
    p1 = out / f"dealer_seed{seed}_party1.bundle"
    p2 = out / f"dealer_seed{seed}_party2.bundle"
    save_bundle(b1, p1)
    save_bundle(b2, p2)
    return p1, p2


def merge_specs(*specs: dict) -> dict:
    out: dict = {}
    for s in specs:
        for k, v in s.items():
            out[k] = out.get(k, 0) + v
    return out


def scale_spec(spec: dict, factor: float, slack: int = 8) -> dict:
    return {k: int(v * factor) + slack for k, v in spec.items()}
