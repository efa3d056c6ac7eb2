import logging
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from fastio.types import PAGE_SIZE

from .core import PptLayout
from .ids import HOST_ID

Backing = Callable[[int], int]

DEFAULT_RING_PAGES = 4
DEFAULT_BUFFER_SIZE = 2048
DEFAULT_HOST_PAGES = 4 + 512


def host_frame(guest_id: int, gpa_page: int) -> int:
    """Default host-physical page backing ``gpa_page`` of ``guest_id``.

    Each guest's 36-bit guest-physical space is placed in its own host range.

    >>> host_frame(0, 0x10)
    16
    >>> hex(host_frame(2, 0x10))
    '0x2000010'
    """
    return (guest_id << 24) | gpa_page


class SlabMap(NamedTuple):
    """One agent's slab: its ring and buffer pages laid out contiguously.

    Parameters
    ----------
    guest_id
        Owning fastio id
    slab_start
        First virtual address of the slab in the PPT
    slab_end
        One past the last virtual address of the slab
    gpa_pages
        Registered guest-physical pages, in slab order (rings first)
    hpa_pages
        Host-physical pages backing ``gpa_pages`` (pinned)
    ring_pages
        Number of leading pages holding rings
    buffer_size
        Bytes per packet buffer
    """

    guest_id: int
    slab_start: int
    slab_end: int
    gpa_pages: Tuple[int, ...]
    hpa_pages: Tuple[int, ...]
    ring_pages: int
    buffer_size: int

    @property
    def mapped_end(self) -> int:
        """One past the last mapped virtual address of the slab."""
        return self.slab_start + len(self.gpa_pages) * PAGE_SIZE

    @property
    def buffer_base(self) -> int:
        """Virtual address of buffer 0."""
        return self.slab_start + self.ring_pages * PAGE_SIZE

    @property
    def n_buffers(self) -> int:
        """Number of packet buffers held by the buffer pages."""
        return (len(self.gpa_pages) - self.ring_pages) * PAGE_SIZE // self.buffer_size

    def buffer_ppt_address(self, index: int) -> int:
        """PPT virtual address of buffer ``index``."""
        if not 0 <= index < self.n_buffers:
            raise ValueError(
                f"Buffer {index} out of range [0, {self.n_buffers}) for guest {self.guest_id}"
            )
        return self.buffer_base + index * self.buffer_size

    def slot_ppt_addresses(self) -> np.ndarray:
        """PPT addresses of every buffer, in buffer order."""
        return self.buffer_base + np.arange(self.n_buffers, dtype=np.int64) * self.buffer_size

    def gpa_of(self, addr: int) -> Tuple[int, int]:
        """Guest-physical page and page offset behind PPT address ``addr``."""
        if not self.slab_start <= addr < self.mapped_end:
            raise ValueError(f"PPT address {addr:#x} is not mapped in guest {self.guest_id}'s slab")
        rel = addr - self.slab_start
        return self.gpa_pages[rel // PAGE_SIZE], rel % PAGE_SIZE


class SlabRegistry:
    """Per-agent slab registrations plus the PPT-address to host-physical hash table.

    The host slab (id 0) is registered when the registry is created.

    Parameters
    ----------
    layout
        PPT geometry
    host_gpa_pages
        Host pages placed in the host slab (defaults to a contiguous range)
    ring_pages
        Leading ring pages in the host slab
    buffer_size
        Bytes per packet buffer in the host slab

    Attributes
    ----------
    slabs
        Registered slabs by id
    pinned
        Host-physical pages pinned for zero-copy transmission
    """

    def __init__(
        self,
        layout: PptLayout,
        host_gpa_pages: Optional[Sequence[int]] = None,
        ring_pages: int = DEFAULT_RING_PAGES,
        buffer_size: int = DEFAULT_BUFFER_SIZE,
    ) -> None:
        self.layout = layout
        self.slabs: Dict[int, SlabMap] = {}
        self.pinned: Set[int] = set()
        self._attested: Set[int] = {HOST_ID}
        self._ppt_to_hpa: Dict[int, int] = {}
        if host_gpa_pages is None:
            host_gpa_pages = range(0x1000, 0x1000 + DEFAULT_HOST_PAGES)
        self.register_guest_rings(HOST_ID, host_gpa_pages, ring_pages, buffer_size)

    def mark_attested(self, guest_id: int) -> None:
        """Record that ``guest_id``'s fastio driver passed attestation."""
        self.layout.check_guest_id(guest_id)
        self._attested.add(guest_id)

    def is_attested(self, guest_id: int) -> bool:
        return guest_id in self._attested

    def register_guest_rings(
        self,
        guest_id: int,
        gpa_pages: Sequence[int],
        ring_pages: int = DEFAULT_RING_PAGES,
        buffer_size: int = DEFAULT_BUFFER_SIZE,
        backing: Optional[Backing] = None,
    ) -> SlabMap:
        """Map an agent's ring and buffer pages contiguously into its slab.

        Pages keep list order even when guest-physically discontiguous. Every
        page's host frame is pinned and entered in the hash table used to turn
        PPT addresses into host-physical addresses.

        Parameters
        ----------
        guest_id
            Attested fastio id
        gpa_pages
            Ring pages followed by buffer pages
        ring_pages
            How many leading pages hold rings
        buffer_size
            Bytes per packet buffer
        backing
            Maps a guest-physical page to its host-physical page

        Returns
        -------
        SlabMap
            The new registration

        Raises
        ------
        ValueError
            If the guest is unattested or already registered, the list is empty
            or does not fit in one slab, or a page repeats
        """
        self.layout.check_guest_id(guest_id)
        if guest_id not in self._attested:
            raise ValueError(f"Guest {guest_id} has not passed driver attestation")
        if guest_id in self.slabs:
            raise ValueError(f"Guest {guest_id} already registered its rings")
        gpa_pages = tuple(int(p) for p in gpa_pages)
        if not gpa_pages:
            raise ValueError(f"Guest {guest_id} registered no pages")
        if len(gpa_pages) > self.layout.slab_pages:
            raise ValueError(
                f"Guest {guest_id} registration of {len(gpa_pages) * PAGE_SIZE} bytes "
                f"exceeds the {self.layout.slab_size}-byte slab"
            )
        if len(set(gpa_pages)) != len(gpa_pages):
            raise ValueError(f"Guest {guest_id} registered a page twice")
        if not 0 <= ring_pages < len(gpa_pages):
            raise ValueError(
                f"ring_pages={ring_pages} leaves no buffer pages among {len(gpa_pages)}"
            )
        if buffer_size <= 0 or PAGE_SIZE % buffer_size:
            raise ValueError(f"buffer_size={buffer_size} must divide the page size")
        if backing is None:
            hpa_pages = tuple(host_frame(guest_id, p) for p in gpa_pages)
        else:
            hpa_pages = tuple(backing(p) for p in gpa_pages)
        start, end = self.layout.slab_range(guest_id)
        slab = SlabMap(
            guest_id=guest_id,
            slab_start=start,
            slab_end=end,
            gpa_pages=gpa_pages,
            hpa_pages=hpa_pages,
            ring_pages=ring_pages,
            buffer_size=buffer_size,
        )
        for i, hpa in enumerate(hpa_pages):
            self._ppt_to_hpa[start // PAGE_SIZE + i] = hpa
            self.pinned.add(hpa)
        self.slabs[guest_id] = slab
        logging.info(
            f"Registered guest {guest_id}: {len(gpa_pages)} pages "
            f"({slab.n_buffers} buffers) at slab {start:#x}"
        )
        return slab

    def unregister(self, guest_id: int) -> None:
        """Drop a guest's registration, unpinning its pages."""
        if guest_id == HOST_ID:
            raise ValueError("The host slab is static")
        slab = self.slabs.pop(guest_id, None)
        if slab is None:
            raise ValueError(f"Guest {guest_id} has no registration")
        for i, hpa in enumerate(slab.hpa_pages):
            del self._ppt_to_hpa[slab.slab_start // PAGE_SIZE + i]
            self.pinned.discard(hpa)
        self._attested.discard(guest_id)

    def slab(self, guest_id: int) -> SlabMap:
        """Registration of ``guest_id``.

        Raises
        ------
        ValueError
            If the guest has no registration
        """
        try:
            return self.slabs[guest_id]
        except KeyError:
            raise ValueError(f"Guest {guest_id} has no ring registration") from None

    def translate(self, ppt_addr: int) -> Optional[int]:
        """Host-physical address behind PPT address ``ppt_addr`` (None if unmapped)."""
        hpa = self._ppt_to_hpa.get(ppt_addr // PAGE_SIZE)
        if hpa is None:
            return None
        return hpa * PAGE_SIZE + ppt_addr % PAGE_SIZE

    def backing_for_pgpa(self, gpa_page: int) -> Optional[int]:
        """Host page behind slab guest-physical page ``gpa_page`` (None if unowned)."""
        guest_id, page = self.layout.pgpa_slab_owner(gpa_page)
        slab = self.slabs.get(guest_id)
        if slab is None or page >= len(slab.gpa_pages):
            return None
        return slab.hpa_pages[page]

    def registered_ids(self) -> List[int]:
        return sorted(self.slabs)
