import numpy as np
import pytest

from secdet import dealer as dealer_mod
from secdet.numeric import default_codec
from secdet.transport import run_two_party

DEFAULT_CODEC = default_codec()


@pytest.fixture
def codec():
    return DEFAULT_CODEC


def make_bundles(spec, seed=0, codec=DEFAULT_CODEC):
    return dealer_mod.generate(seed, spec, codec)


def run_protocol(program, in1, in2, spec, seed=0, transport="inproc", codec=DEFAULT_CODEC):
    """Two-party run with freshly dealt randomness; returns (out1, out2, transcript)."""
    bundles = make_bundles(spec, seed=seed, codec=codec)
    return run_two_party(program, (in1, in2), bundles, codec, transport=transport)


def share_values(values, rng, codec=DEFAULT_CODEC):
    """Field-share an array of reals; returns the two uint64 share arrays."""
    enc = codec.encode(np.asarray(values, dtype=np.float64))
    s1 = codec.ring.rand(rng, enc.shape)
    return s1, codec.ring.sub(enc, s1)


def decode_sum(s1, s2, codec=DEFAULT_CODEC):
    return codec.decode(codec.ring.add(s1, s2))
