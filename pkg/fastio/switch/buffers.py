"""Packet buffer pools over numpy payload memory, with copy instrumentation."""
from collections import Counter, deque
from typing import Deque, Dict, Optional

import numpy as np

TX_PATH = "tx"
RX_PATH = "rx"
PATHS = (TX_PATH, RX_PATH)


class CopyMeter:
    """Counts payload copies and copied bytes per data path.

    Device DMA into a posted buffer is counted apart from CPU copies.
    """

    def __init__(self) -> None:
        self.copies: Counter = Counter()
        self.bytes_copied: Counter = Counter()
        self.dma_bytes = 0

    def record(self, path: str, n_bytes: int) -> None:
        if path not in PATHS:
            raise ValueError(f"Unknown data path {path!r}, expected one of {PATHS}")
        self.copies[path] += 1
        self.bytes_copied[path] += n_bytes

    def to_dict(self) -> Dict[str, int]:
        d = {f"{p}_copies": int(self.copies[p]) for p in PATHS}
        d.update({f"{p}_bytes_copied": int(self.bytes_copied[p]) for p in PATHS})
        d["dma_bytes"] = self.dma_bytes
        return d


class BufferPool:
    """One agent's packet buffers: payload memory plus a free list.

    Parameters
    ----------
    owner_id
        Owning agent (-1 for buffers private to the hardware ring)
    n_buffers
        Number of buffers
    buffer_size
        Bytes per buffer
    meter
        Copy instrumentation shared with the switch (a new one if None)
    """

    def __init__(
        self, owner_id: int, n_buffers: int, buffer_size: int, meter: Optional[CopyMeter] = None
    ) -> None:
        if n_buffers < 1:
            raise ValueError(f"A buffer pool needs at least one buffer, got {n_buffers}")
        self.owner_id = owner_id
        self.buffer_size = buffer_size
        self.payload = np.zeros((n_buffers, buffer_size), dtype=np.uint8)
        self.lengths = np.zeros(n_buffers, dtype=np.int64)
        self.meter = meter if meter is not None else CopyMeter()
        self._free: Deque[int] = deque(range(n_buffers))
        self._in_use = np.zeros(n_buffers, dtype=bool)

    @property
    def n_buffers(self) -> int:
        return len(self.lengths)

    @property
    def n_free(self) -> int:
        return len(self._free)

    def alloc(self) -> Optional[int]:
        """Take a free buffer, or None if the pool is exhausted."""
        if not self._free:
            return None
        index = self._free.popleft()
        self._in_use[index] = True
        return index

    def free(self, index: int) -> None:
        """Return buffer ``index`` to the pool.

        Raises
        ------
        ValueError
            If the buffer is out of range or already free
        """
        if not 0 <= index < self.n_buffers:
            raise ValueError(f"Buffer {index} out of range [0, {self.n_buffers}) in pool {self.owner_id}")
        if not self._in_use[index]:
            raise ValueError(f"Buffer {index} of pool {self.owner_id} freed twice")
        self._in_use[index] = False
        self.lengths[index] = 0
        self._free.append(index)

    def in_use(self, index: int) -> bool:
        return bool(self._in_use[index])

    def fill(self, index: int, packet: np.ndarray) -> None:
        """The owner's application writes a packet into its own buffer (not a switch copy)."""
        n = len(packet)
        if n > self.buffer_size:
            raise ValueError(f"Packet of {n} bytes exceeds the {self.buffer_size}-byte buffer")
        self.payload[index, :n] = packet
        self.lengths[index] = n

    def dma(self, index: int, source: "BufferPool", source_index: int) -> None:
        """Device transfer from another pool's buffer into a posted buffer."""
        n = int(source.lengths[source_index])
        self.payload[index, :n] = source.payload[source_index, :n]
        self.lengths[index] = n
        self.meter.dma_bytes += n

    def copy_from(self, index: int, source: "BufferPool", source_index: int, path: str = RX_PATH) -> None:
        """CPU copy of a packet from another buffer, counted on ``path``."""
        n = int(source.lengths[source_index])
        self.payload[index, :n] = source.payload[source_index, :n]
        self.lengths[index] = n
        self.meter.record(path, n)

    def packet(self, index: int) -> np.ndarray:
        """View of the packet held in buffer ``index``."""
        return self.payload[index, : self.lengths[index]]
