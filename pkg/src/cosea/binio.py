"""Little-endian binary reading shared by the checkpoint and index formats."""

import struct

import numpy as np

from .errors import CorruptionError


class ByteReader:
    """Cursor over a byte buffer that reports the offset of any truncation."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def text(self, what: str) -> str:
        n = self.u32(f"{what} length")
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError(f"invalid UTF-8 in {what}", start) from None

    def tensors(self) -> dict:
        out = {}
        for _ in range(self.u32("tensor count")):
            name = self.text("tensor name")
            rank = self.u32(f"rank of {name}")
            if rank > 8:
                raise CorruptionError(f"implausible rank {rank} for {name}", self.pos - 4)
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank, f"dims of {name}"))
            count = int(np.prod(dims)) if rank else 1
            payload = self.take(8 * count, f"payload of {name}")
            out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        return out
