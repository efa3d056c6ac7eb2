from typing import Any, Dict, Tuple

from fastio.types import PAGE_SIZE, Config

MiB = 1 << 20
GiB = 1 << 30


class PptLayout(Config):
    """Geometry of the privileged (PPT) address space.

    Parameters
    ----------
    pdva
        Virtual address where device pages are mapped
    device_pages
        Number of device pages (512 MMIO pages plus 4 ring pages)
    ppt_va_start
        Virtual address of the first slab (the host's)
    slab_size
        Bytes of virtual space per agent slab
    kernel_base
        Start of the guest kernel's half of the address space
    pgpa_base
        First privileged guest-physical address (above normal RAM)
    pgpa_start
        Guest-physical address backing the first slab
    private_stack_pages
        Pages of per-CPU private stack mapped right after the device window
    cpus
        Number of virtual CPUs with a private stack

    Examples
    --------
    >>> layout = PptLayout()
    >>> layout.max_guests
    191
    >>> [hex(a) for a in layout.slab_range(2)]
    ['0x3000000', '0x4000000']
    """

    pdva: int = 4 * MiB
    device_pages: int = 516
    ppt_va_start: int = 16 * MiB
    slab_size: int = 16 * MiB
    kernel_base: int = 0xC0000000
    pgpa_base: int = 4 * GiB
    pgpa_start: int = 4 * GiB + 16 * MiB
    private_stack_pages: int = 1
    cpus: int = 1

    @property
    def max_guests(self) -> int:
        """Slabs that fit between ``ppt_va_start`` and ``kernel_base``, host included."""
        return (self.kernel_base - self.ppt_va_start) // self.slab_size

    @property
    def slab_pages(self) -> int:
        """Pages per slab."""
        return self.slab_size // PAGE_SIZE

    @property
    def device_window(self) -> Tuple[int, int]:
        """Virtual range ``[pdva, pdva + device_pages * 4096)``."""
        return self.pdva, self.pdva + self.device_pages * PAGE_SIZE

    @property
    def private_stack_window(self) -> Tuple[int, int]:
        """Virtual range holding the per-CPU private stacks."""
        start = self.device_window[1]
        return start, start + self.cpus * self.private_stack_pages * PAGE_SIZE

    def private_stack_top(self, cpu: int = 0) -> int:
        """Initial stack pointer of ``cpu``'s private stack."""
        start = self.private_stack_window[0]
        return start + (cpu + 1) * self.private_stack_pages * PAGE_SIZE

    @property
    def pgpa_base_page(self) -> int:
        """First privileged guest-physical page number."""
        return self.pgpa_base // PAGE_SIZE

    @property
    def pgpa_start_page(self) -> int:
        """Guest-physical page number backing the first slab byte."""
        return self.pgpa_start // PAGE_SIZE

    @property
    def pgpa_end_page(self) -> int:
        """One past the last guest-physical page any slab can use."""
        return self.pgpa_start_page + self.max_guests * self.slab_pages

    def validate(self) -> "PptLayout":
        """Check the geometry invariants.

        Raises
        ------
        ValueError
            If any window overlaps another or a size is not page aligned
        """
        for name in ("pdva", "ppt_va_start", "slab_size", "kernel_base", "pgpa_base", "pgpa_start"):
            value = getattr(self, name)
            if value <= 0 or value % PAGE_SIZE:
                raise ValueError(f"{name}={value:#x} must be a positive multiple of {PAGE_SIZE}")
        if self.device_pages <= 0:
            raise ValueError(f"device_pages must be positive, got {self.device_pages}")
        if self.private_stack_window[1] > self.ppt_va_start:
            raise ValueError(
                f"Device window and private stacks end at {self.private_stack_window[1]:#x}, "
                f"past ppt_va_start={self.ppt_va_start:#x}"
            )
        if self.max_guests < 1:
            raise ValueError(
                f"No slab of {self.slab_size:#x} bytes fits between "
                f"{self.ppt_va_start:#x} and {self.kernel_base:#x}"
            )
        if self.ppt_va_start + self.max_guests * self.slab_size > self.kernel_base:
            raise ValueError("Slabs overlap the kernel window")
        pgpa_used = (self.device_pages + self.cpus * self.private_stack_pages) * PAGE_SIZE
        if self.pgpa_base + pgpa_used > self.pgpa_start:
            raise ValueError(
                f"Device and stack pages overflow into slab memory at {self.pgpa_start:#x}"
            )
        return self

    def check_guest_id(self, guest_id: int) -> None:
        """Raise ValueError unless ``0 <= guest_id < max_guests``."""
        if not 0 <= guest_id < self.max_guests:
            raise ValueError(
                f"Guest id {guest_id} out of range [0, {self.max_guests}) for this layout"
            )

    def slab_range(self, guest_id: int) -> Tuple[int, int]:
        """Virtual range ``[start, end)`` of ``guest_id``'s slab.

        Raises
        ------
        ValueError
            If the id is out of range (its slab would cross ``kernel_base``)
        """
        self.check_guest_id(guest_id)
        start = self.ppt_va_start + guest_id * self.slab_size
        return start, start + self.slab_size

    def validate_ppt_address(self, addr: int, guest_id: int) -> bool:
        """Base-and-bounds check: does ``addr`` lie inside ``guest_id``'s slab?"""
        if not 0 <= guest_id < self.max_guests:
            return False
        start = self.ppt_va_start + guest_id * self.slab_size
        return start <= addr < start + self.slab_size

    def slab_owner(self, addr: int) -> int:
        """Guest id whose slab holds virtual address ``addr``, or -1."""
        if not self.ppt_va_start <= addr < self.ppt_va_start + self.max_guests * self.slab_size:
            return -1
        return (addr - self.ppt_va_start) // self.slab_size

    def slab_gpa_page(self, guest_id: int, page: int) -> int:
        """Guest-physical page backing page ``page`` of ``guest_id``'s slab."""
        self.check_guest_id(guest_id)
        if not 0 <= page < self.slab_pages:
            raise ValueError(f"Slab page {page} out of range [0, {self.slab_pages})")
        return self.pgpa_start_page + guest_id * self.slab_pages + page

    def pgpa_slab_owner(self, gpa_page: int) -> Tuple[int, int]:
        """Split a slab guest-physical page into ``(guest_id, page_in_slab)``.

        Raises
        ------
        ValueError
            If the page lies outside the slab region
        """
        if not self.pgpa_start_page <= gpa_page < self.pgpa_end_page:
            raise ValueError(f"Guest-physical page {gpa_page:#x} is outside the slab region")
        rel = gpa_page - self.pgpa_start_page
        return rel // self.slab_pages, rel % self.slab_pages

    def geometry(self) -> Dict[str, Any]:
        """Resolved geometry as a JSON-compatible dict."""
        device_start, device_end = self.device_window
        stack_start, stack_end = self.private_stack_window
        return {
            "pdva": device_start,
            "device_pages": self.device_pages,
            "device_window": [device_start, device_end],
            "private_stack_window": [stack_start, stack_end],
            "ppt_va_start": self.ppt_va_start,
            "slab_size": self.slab_size,
            "kernel_base": self.kernel_base,
            "max_guests": self.max_guests,
            "pgpa_base": self.pgpa_base,
            "pgpa_start": self.pgpa_start,
            "host_slab": list(self.slab_range(0)),
            "last_slab": list(self.slab_range(self.max_guests - 1)),
        }
