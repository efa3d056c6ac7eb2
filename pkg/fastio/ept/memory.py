import struct
from typing import Dict, Iterator, Optional

from fastio.types import PAGE_SIZE, PageData

# guest-physical capacity of the paging model (36-bit addresses)
GPA_PAGE_LIMIT = 1 << 24


class GuestMemory:
    """Sparse guest-physical memory of 4096-byte pages, allocated on first touch.

    Parameters
    ----------
    ram_pages
        Pages of ordinary RAM (``0 .. ram_pages - 1``)
    first_free_page
        First page handed out by :meth:`alloc_page`
    host_offset
        Host-physical page of guest page 0
    """

    def __init__(self, ram_pages: int = 65536, first_free_page: int = 0x100, host_offset: int = 0) -> None:
        if not 0 < ram_pages <= GPA_PAGE_LIMIT:
            raise ValueError(f"ram_pages must be in (0, {GPA_PAGE_LIMIT}], got {ram_pages}")
        self.ram_pages = ram_pages
        self.host_offset = host_offset
        self._pages: Dict[int, bytearray] = {}
        self._next_free = first_free_page

    def is_ram(self, gpa_page: int) -> bool:
        return 0 <= gpa_page < self.ram_pages

    def alloc_page(self) -> int:
        """Hand out the next never-used RAM page (zero filled).

        Raises
        ------
        RuntimeError
            If RAM is exhausted
        """
        while self._next_free in self._pages:
            self._next_free += 1
        if self._next_free >= self.ram_pages:
            raise RuntimeError(f"Guest RAM of {self.ram_pages} pages exhausted")
        gpa_page = self._next_free
        self._next_free += 1
        self._pages[gpa_page] = bytearray(PAGE_SIZE)
        return gpa_page

    def page(self, gpa_page: int) -> bytearray:
        """Mutable content of ``gpa_page`` (created zero filled on first touch)."""
        buf = self._pages.get(gpa_page)
        if buf is None:
            if not 0 <= gpa_page < GPA_PAGE_LIMIT:
                raise ValueError(f"Guest-physical page {gpa_page:#x} beyond 36-bit capacity")
            buf = self._pages[gpa_page] = bytearray(PAGE_SIZE)
        return buf

    def read_page(self, gpa_page: int) -> bytes:
        return bytes(self.page(gpa_page))

    def write(self, gpa_page: int, offset: int, data: PageData) -> None:
        """Write bytes inside one page."""
        data = bytes(data)
        if not 0 <= offset <= PAGE_SIZE - len(data):
            raise ValueError(f"Write of {len(data)} bytes at offset {offset} crosses the page")
        self.page(gpa_page)[offset : offset + len(data)] = data

    def read32(self, gpa_page: int, offset: int) -> int:
        return int(struct.unpack_from("<I", self.page(gpa_page), offset)[0])

    def write32(self, gpa_page: int, offset: int, value: int) -> None:
        struct.pack_into("<I", self.page(gpa_page), offset, value & 0xFFFFFFFF)

    def backing(self, gpa_page: int) -> int:
        """Host-physical page backing a RAM page."""
        return self.host_offset + gpa_page

    def touched(self) -> Iterator[int]:
        """Pages that have content, in increasing order."""
        return iter(sorted(self._pages))

    def snapshot(self, gpa_page: int) -> Optional[bytes]:
        buf = self._pages.get(gpa_page)
        return None if buf is None else bytes(buf)
