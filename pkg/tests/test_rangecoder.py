"""Range coder: exact round-trips under fuzzed tables, tight coding
overhead, and the framed-stream wrapper."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxpcc.errors import DataError, UsageError
from voxpcc.rangecoder import (RangeDecoder, RangeEncoder, pack_stream,
                               unpack_stream)


def _roundtrip(freqs: np.ndarray, symbols: np.ndarray) -> bytes:
    cums = np.concatenate([[0], np.cumsum(freqs)])
    total = int(cums[-1])
    enc = RangeEncoder()
    for s in symbols:
        enc.encode(int(cums[s]), int(freqs[s]), total)
    payload = enc.finish()
    dec = RangeDecoder(payload)
    for s in symbols:
        f = dec.decode_freq(total)
        got = int(np.searchsorted(cums, f, side="right")) - 1
        assert got == s
        dec.decode_update(int(cums[got]), int(freqs[got]), total)
    return payload


def test_roundtrip_small_alphabet():
    rng = np.random.default_rng(0)
    freqs = np.array([1, 7, 100, 9000, 1], dtype=np.int64)
    symbols = rng.integers(0, 5, size=2000)
    _roundtrip(freqs, symbols)


def test_roundtrip_large_fuzz():
    # one long stream against a skewed 64-symbol table
    rng = np.random.default_rng(1)
    freqs = rng.integers(1, 400, size=64)
    freqs[0] = 30_000  # heavy head, total stays under 2^16
    symbols = rng.choice(64, size=10_000,
                         p=freqs / freqs.sum())
    payload = _roundtrip(freqs, symbols)
    # near-entropy length: H + 1% + a few bytes of flush slack
    p = freqs / freqs.sum()
    entropy_bits = float(-(np.log2(p[symbols])).sum())
    assert len(payload) <= entropy_bits / 8 * 1.01 + 8


def test_many_short_streams():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n_sym = int(rng.integers(2, 20))
        freqs = rng.integers(1, 500, size=n_sym)
        count = int(rng.integers(1, 60))
        symbols = rng.integers(0, n_sym, size=count)
        _roundtrip(freqs, symbols)


def test_single_symbol_alphabet():
    _roundtrip(np.array([17]), np.zeros(100, dtype=int))


def test_encoder_rejects_bad_intervals():
    enc = RangeEncoder()
    with pytest.raises(UsageError):
        enc.encode(0, 0, 10)
    with pytest.raises(UsageError):
        enc.encode(5, 7, 10)
    with pytest.raises(UsageError):
        enc.encode(0, 1, (1 << 16) + 1)


def test_encoding_is_deterministic():
    freqs = np.array([3, 5, 11])
    symbols = np.array([0, 1, 2, 1, 1, 0, 2] * 30)
    assert _roundtrip(freqs, symbols) == _roundtrip(freqs, symbols)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n_sym=st.integers(2, 40),
       count=st.integers(0, 200))
def test_roundtrip_property(seed, n_sym, count):
    rng = np.random.default_rng(seed)
    freqs = rng.integers(1, 1000, size=n_sym)
    symbols = rng.integers(0, n_sym, size=count)
    _roundtrip(freqs, symbols)


# ---------------------------------------------------------------------------
# framing

def test_pack_unpack_round_trip():
    payload = b"\x00\x01\xfe payload bytes"
    buf = b"prefix" + pack_stream(payload) + b"suffix"
    got, end = unpack_stream(buf, offset=6)
    assert got == payload
    assert buf[end:] == b"suffix"


def test_pack_empty_payload():
    buf = pack_stream(b"")
    got, end = unpack_stream(buf)
    assert got == b"" and end == len(buf)


def test_unpack_rejects_corruption():
    buf = bytearray(pack_stream(b"hello range coder"))
    buf[-3] ^= 0x40
    with pytest.raises(DataError, match="checksum"):
        unpack_stream(bytes(buf))


def test_unpack_rejects_truncation():
    buf = pack_stream(b"hello range coder")
    with pytest.raises(DataError):
        unpack_stream(buf[:-4])
    with pytest.raises(DataError):
        unpack_stream(buf[:3])
