import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echobp.errors import StreamFormatError
from echobp.rfio import (HEADER_SIZE, ArrayRfStream, RfStreamHeader, read_rf, write_rf)


def _header(n_channels=3, samples=64):
    return RfStreamHeader(n_channels, 80_000_000, 2000, samples, 18000, 1480000)


def test_header_layout():
    h = _header()
    raw = h.pack()
    assert HEADER_SIZE == 27 and len(raw) == 27
    # Independent decode with explicit offsets.
    assert raw[:4] == b"UPRF"
    assert struct.unpack_from("<H", raw, 4)[0] == 1
    assert raw[6] == 3
    assert struct.unpack_from("<5I", raw, 7) == (80_000_000, 2000, 64, 18000, 1480000)
    assert RfStreamHeader.unpack(raw) == h
    assert h.speed_of_sound_mps == 1480.0
    assert np.allclose(h.channel_positions_m(), [0, 0.018, 0.036])


def test_header_errors():
    with pytest.raises(StreamFormatError, match="bad magic"):
        RfStreamHeader.unpack(b"XXXX" + _header().pack()[4:])
    with pytest.raises(StreamFormatError, match="unexpected end of stream"):
        RfStreamHeader.unpack(b"UPRF\x01")
    bad_version = bytearray(_header().pack())
    bad_version[4] = 9
    with pytest.raises(StreamFormatError, match="version"):
        RfStreamHeader.unpack(bytes(bad_version))
    with pytest.raises(StreamFormatError):
        _header(n_channels=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 40), st.integers(1, 50), st.integers(0, 2**31))
def test_roundtrip_bit_identical(tmp_path_factory, n_ch, samples, n_frames, seed):
    rng = np.random.default_rng(seed)
    data = rng.integers(-32768, 32768, size=(n_frames, n_ch, samples), dtype=np.int16)
    s = ArrayRfStream(_header(n_ch, samples), data)
    path = tmp_path_factory.mktemp("rf") / "x.bin"
    write_rf(path, s, block_frames=7)
    raw1 = path.read_bytes()
    assert len(raw1) == HEADER_SIZE + data.nbytes
    back = read_rf(path)
    assert back.header == s.header and back.n_frames == n_frames
    assert np.array_equal(back.read(np.arange(n_frames)), data)
    path2 = path.with_name("y.bin")
    write_rf(path2, back)
    assert path2.read_bytes() == raw1
    assert np.array_equal(read_rf(path, mmap=False).read_range(0, n_frames), data)


def test_truncated_payload(tmp_path):
    data = np.zeros((4, 3, 64), np.int16)
    path = tmp_path / "t.bin"
    write_rf(path, ArrayRfStream(_header(), data))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(StreamFormatError, match="unexpected end of stream"):
        read_rf(path)


def test_array_stream_checks():
    with pytest.raises(StreamFormatError):
        ArrayRfStream(_header(), np.zeros((2, 2, 64), np.int16))
    s = ArrayRfStream(_header(), np.zeros((5, 3, 64)))
    assert s.data.dtype == np.dtype("<i2")
    assert s.duration_s == 5 / 2000
    with pytest.raises(IndexError):
        s.read([5])
    blocks = list(s.iter_blocks(2))
    assert [b.shape[0] for b in blocks] == [2, 2, 1]
