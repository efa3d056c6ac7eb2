"""Netmap-style rings: a fixed slot array with producer (head) and consumer (tail) cursors."""
from enum import Enum
from typing import Generic, Iterator, List, NamedTuple, Optional, TypeVar

T = TypeVar("T")


class Direction(Enum):
    TX = "tx"
    RX = "rx"


class RingSlot(NamedTuple):
    """One netmap ring slot.

    Parameters
    ----------
    buffer_index
        Owner-local buffer number
    length
        Packet length in bytes
    guest_address
        Buffer address in the owner's own address space
    ppt_address
        Address of the same buffer in the owner's slab of the PPT
    """

    buffer_index: int
    length: int
    guest_address: int
    ppt_address: int


class NetmapRing(Generic[T]):
    """A single-producer single-consumer ring of ``n_slots`` slots.

    The producer writes at ``head`` and the consumer reads at ``tail``; both
    only move forward, wrapping modulo ``n_slots``. One slot always stays empty
    so that a full ring and an empty ring have different cursors, which makes
    the usable capacity ``n_slots - 1``.

    Parameters
    ----------
    n_slots
        Slot array size (at least 2)
    owner_id
        Agent owning the ring (-1 for the hardware ring)
    direction
        Transmit or receive

    Examples
    --------
    >>> ring = NetmapRing(4)
    >>> [ring.push(i) for i in range(4)]
    [True, True, True, False]
    >>> ring.occupancy, ring.pop(), ring.occupancy
    (3, 0, 2)
    """

    def __init__(self, n_slots: int, owner_id: int = -1, direction: Direction = Direction.TX) -> None:
        if n_slots < 2:
            raise ValueError(f"A ring needs at least 2 slots, got {n_slots}")
        self.n_slots = n_slots
        self.owner_id = owner_id
        self.direction = direction
        self._slots: List[Optional[T]] = [None] * n_slots
        self.head = 0
        self.tail = 0

    @property
    def capacity(self) -> int:
        return self.n_slots - 1

    @property
    def occupancy(self) -> int:
        return (self.head - self.tail) % self.n_slots

    @property
    def free_space(self) -> int:
        return self.capacity - self.occupancy

    def is_empty(self) -> bool:
        return self.head == self.tail

    def is_full(self) -> bool:
        return (self.head + 1) % self.n_slots == self.tail

    def push(self, item: T) -> bool:
        """Produce one slot; False (and no change) if the ring is full."""
        if self.is_full():
            return False
        self._slots[self.head] = item
        self.head = (self.head + 1) % self.n_slots
        return True

    def peek(self) -> Optional[T]:
        """The next slot to consume, without consuming it."""
        if self.is_empty():
            return None
        return self._slots[self.tail]

    def pop(self) -> Optional[T]:
        """Consume one slot, or None if the ring is empty."""
        if self.is_empty():
            return None
        item = self._slots[self.tail]
        self._slots[self.tail] = None
        self.tail = (self.tail + 1) % self.n_slots
        return item

    def drain(self, limit: Optional[int] = None) -> List[T]:
        """Consume up to ``limit`` slots (all if None), oldest first."""
        n = self.occupancy if limit is None else min(limit, self.occupancy)
        return [self.pop() for _ in range(n)]  # type: ignore

    def __len__(self) -> int:
        return self.occupancy

    def __iter__(self) -> Iterator[T]:
        """Pending slots, oldest first (the ring is not modified)."""
        for i in range(self.occupancy):
            yield self._slots[(self.tail + i) % self.n_slots]  # type: ignore

    def __repr__(self) -> str:
        return (
            f"NetmapRing(owner={self.owner_id}, {self.direction.value}, "
            f"{self.occupancy}/{self.capacity}, head={self.head}, tail={self.tail})"
        )
