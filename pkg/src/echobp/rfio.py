"""Binary RF stream format and frame-source containers.

File layout (all little-endian)::

    offset  size  field
    0       4     magic "UPRF"
    4       2     version (u16)
    6       1     n_channels (u8)
    7       4     rf_rate_hz (u32)
    11      4     prf_hz (u32)
    15      4     samples_per_frame (u32)
    19      4     element_spacing_um (u32)
    23      4     speed_of_sound_mmps (u32)
    27      ...   frames: int16[n_frames][n_channels][samples_per_frame]

One frame per PRF tick holds every channel back to back (channel-major).
The frame count is implied by the payload size.
"""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import StreamFormatError

MAGIC = b"UPRF"
VERSION = 1
_HEADER = struct.Struct("<4sHBIIIII")
HEADER_SIZE = _HEADER.size
SAMPLE_DTYPE = np.dtype("<i2")


@dataclass(frozen=True)
class RfStreamHeader:
    n_channels: int
    rf_rate_hz: int
    prf_hz: int
    samples_per_frame: int
    element_spacing_um: int
    speed_of_sound_mmps: int
    version: int = VERSION

    def __post_init__(self):
        if not 1 <= self.n_channels <= 255:
            raise StreamFormatError(f"n_channels out of range: {self.n_channels}")
        for name in ("rf_rate_hz", "prf_hz", "samples_per_frame", "speed_of_sound_mmps"):
            if getattr(self, name) <= 0:
                raise StreamFormatError(f"{name} must be positive")

    @property
    def frame_bytes(self):
        return self.n_channels * self.samples_per_frame * SAMPLE_DTYPE.itemsize

    @property
    def element_spacing_m(self):
        return self.element_spacing_um * 1e-6

    @property
    def speed_of_sound_mps(self):
        return self.speed_of_sound_mmps / 1000.0

    def channel_positions_m(self):
        return np.arange(self.n_channels) * self.element_spacing_m

    def pack(self):
        return _HEADER.pack(MAGIC, self.version, self.n_channels, self.rf_rate_hz,
                            self.prf_hz, self.samples_per_frame,
                            self.element_spacing_um, self.speed_of_sound_mmps)

    @classmethod
    def unpack(cls, raw):
        if len(raw) < HEADER_SIZE:
            raise StreamFormatError("unexpected end of stream (truncated header)")
        magic, version, *fields = _HEADER.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise StreamFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise StreamFormatError(f"unsupported version {version}")
        return cls(*fields, version=version)


class RfStream:
    """Random-access source of RF frames.

    Subclasses implement :meth:`read`, returning an int16 array shaped
    ``(len(indices), n_channels, samples_per_frame)``.
    """

    header: RfStreamHeader
    n_frames: int

    def read(self, indices):
        raise NotImplementedError

    def read_range(self, start, stop, step=1):
        return self.read(np.arange(start, stop, step))

    @property
    def duration_s(self):
        return self.n_frames / self.header.prf_hz

    def iter_blocks(self, block_frames=256):
        for start in range(0, self.n_frames, block_frames):
            yield self.read_range(start, min(start + block_frames, self.n_frames))


class ArrayRfStream(RfStream):
    """Frames held in an int16 array (in memory or memory-mapped)."""

    def __init__(self, header, data):
        data = np.asarray(data) if not isinstance(data, np.memmap) else data
        expected = (header.n_channels, header.samples_per_frame)
        if data.ndim != 3 or data.shape[1:] != expected:
            raise StreamFormatError(
                f"frame array shape {data.shape} does not match header {expected}")
        if data.dtype != SAMPLE_DTYPE:
            data = data.astype(SAMPLE_DTYPE)
        self.header = header
        self.data = data
        self.n_frames = data.shape[0]

    def read(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_frames):
            raise IndexError("frame index out of range")
        return np.asarray(self.data[indices])


def write_rf(path, stream, block_frames=512):
    """Write ``stream`` to ``path``; returns the number of frames written."""
    n = 0
    with open(path, "wb") as fh:
        fh.write(stream.header.pack())
        for block in stream.iter_blocks(block_frames):
            fh.write(np.ascontiguousarray(block, dtype=SAMPLE_DTYPE).tobytes())
            n += block.shape[0]
    return n


def read_rf(path, mmap=True):
    """Open an RF file. Frames are memory-mapped unless ``mmap`` is False."""
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
        header = RfStreamHeader.unpack(raw)
        fh.seek(0, 2)
        payload = fh.tell() - HEADER_SIZE
    if payload % header.frame_bytes:
        raise StreamFormatError(
            f"unexpected end of stream: {payload} payload bytes is not a whole "
            f"number of {header.frame_bytes}-byte frames")
    n_frames = payload // header.frame_bytes
    shape = (n_frames, header.n_channels, header.samples_per_frame)
    if n_frames == 0:
        return ArrayRfStream(header, np.zeros(shape, SAMPLE_DTYPE))
    if mmap:
        data = np.memmap(path, dtype=SAMPLE_DTYPE, mode="r", offset=HEADER_SIZE, shape=shape)
    else:
        with open(path, "rb") as fh:
            fh.seek(HEADER_SIZE)
            data = np.frombuffer(fh.read(), dtype=SAMPLE_DTYPE).reshape(shape)
    return ArrayRfStream(header, data)
