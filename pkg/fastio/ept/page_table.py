"""Two-level guest page tables with 36-bit guest-physical capacity.

A table is one 4096-byte page of 1024 little-endian 4-byte entries. An entry
holds the 24-bit guest-physical page number in bits 8..31 and flags in bits
0..7, so a virtual address splits 10/10/12 bits while entries can reach
guest-physical pages above 4 GiB.
"""
from typing import Dict, List, NamedTuple, Optional, Set, Tuple

import numpy as np

from fastio.layout import PptLayout
from fastio.types import PAGE_SIZE

from .memory import GuestMemory

ENTRIES = 1024

PTE_PRESENT = 0x1
PTE_WRITE = 0x2
PTE_USER = 0x4
PTE_EXEC = 0x8

LEAF_DEFAULT = PTE_PRESENT | PTE_WRITE | PTE_EXEC
TABLE_DEFAULT = PTE_PRESENT | PTE_WRITE | PTE_USER | PTE_EXEC


def make_entry(gpa_page: int, flags: int = LEAF_DEFAULT) -> int:
    """Encode a table entry.

    >>> hex(make_entry(0x100010, PTE_PRESENT))
    '0x10001001'
    """
    if not 0 <= gpa_page < (1 << 24):
        raise ValueError(f"Guest-physical page {gpa_page:#x} does not fit in an entry")
    return (gpa_page << 8) | (flags & 0xFF)


def entry_page(entry: int) -> int:
    return entry >> 8


def entry_flags(entry: int) -> int:
    return entry & 0xFF


def split_va(va: int) -> Tuple[int, int, int]:
    """Split a virtual address into (directory index, table index, offset).

    >>> split_va(0xC0101234)
    (768, 257, 564)
    """
    return (va >> 22) & 0x3FF, (va >> 12) & 0x3FF, va & 0xFFF


class Mapping(NamedTuple):
    """One present leaf: virtual page to guest-physical page."""

    va_page: int
    gpa_page: int
    flags: int


class TableWalk(NamedTuple):
    """Everything reachable from a root.

    Parameters
    ----------
    root
        Root table page
    table_pages
        Root plus every present second-level table
    leaves
        Present leaf mappings in virtual order
    missing
        ``(table_page, index, gpa_page)`` of directory entries pointing outside RAM
    directory
        ``(dir_index, table_page)`` of every present second-level table
    """

    root: int
    table_pages: Tuple[int, ...]
    leaves: Tuple[Mapping, ...]
    missing: Tuple[Tuple[int, int, int], ...]
    directory: Tuple[Tuple[int, int], ...] = ()


def _entries(memory: GuestMemory, table: int) -> np.ndarray:
    return np.frombuffer(bytes(memory.page(table)), dtype="<u4")


def leaf_mappings(memory: GuestMemory, table: int, dir_index: int) -> List[Mapping]:
    """Present entries of second-level ``table`` installed at ``dir_index``."""
    entries = _entries(memory, table)
    return [
        Mapping(dir_index * ENTRIES + int(t), int(entries[t]) >> 8, int(entries[t]) & 0xFF)
        for t in np.flatnonzero(entries & PTE_PRESENT)
    ]


class GuestPageTable:
    """Read-only view of a guest page table rooted at ``root``.

    Parameters
    ----------
    memory
        Guest-physical memory holding the tables
    root
        Root (directory) page number, the value loaded into cr3 >> 12
    """

    def __init__(self, memory: GuestMemory, root: int) -> None:
        self.memory = memory
        self.root = root

    def walk(self) -> TableWalk:
        """Walk the whole table."""
        tables = [self.root]
        leaves: List[Mapping] = []
        missing: List[Tuple[int, int, int]] = []
        placed: List[Tuple[int, int]] = []
        directory = _entries(self.memory, self.root)
        for d in np.flatnonzero(directory & PTE_PRESENT):
            table = int(directory[d]) >> 8
            if not self.memory.is_ram(table):
                missing.append((self.root, int(d), table))
                continue
            if table not in tables:
                tables.append(table)
            placed.append((int(d), table))
            leaves.extend(leaf_mappings(self.memory, table, int(d)))
        return TableWalk(self.root, tuple(tables), tuple(leaves), tuple(missing), tuple(placed))

    def leaf_table(self, dir_index: int) -> Optional[int]:
        """Second-level table for ``dir_index`` (None if absent)."""
        pde = self.memory.read32(self.root, dir_index * 4)
        if not pde & PTE_PRESENT or not self.memory.is_ram(pde >> 8):
            return None
        return pde >> 8

    def translate(self, va: int) -> Optional[Tuple[int, int]]:
        """Translate ``va`` to ``(gpa_page, flags)``, or None if unmapped."""
        d, t, _ = split_va(va)
        table = self.leaf_table(d)
        if table is None:
            return None
        pte = self.memory.read32(table, t * 4)
        if not pte & PTE_PRESENT:
            return None
        return pte >> 8, pte & 0xFF


class PageTableBuilder:
    """Builds guest page tables by writing entries into guest memory.

    Writes go straight to memory; callers that must respect EPT write
    protection route each returned write through the monitor instead.

    Parameters
    ----------
    memory
        Guest-physical memory
    root
        Existing root page, or None to allocate a fresh one
    """

    def __init__(self, memory: GuestMemory, root: Optional[int] = None) -> None:
        self.memory = memory
        self.root = memory.alloc_page() if root is None else root

    def plan_map(self, va: int, gpa_page: int, flags: int = LEAF_DEFAULT) -> List[Tuple[int, int, int]]:
        """Writes ``(table_page, index, value)`` needed to map ``va``.

        A missing second-level table is allocated (zero filled) and its
        directory entry is part of the returned writes.
        """
        d, t, _ = split_va(va)
        writes = []
        table = GuestPageTable(self.memory, self.root).leaf_table(d)
        if table is None:
            table = self.memory.alloc_page()
            writes.append((self.root, d, make_entry(table, TABLE_DEFAULT)))
        writes.append((table, t, make_entry(gpa_page, flags)))
        return writes

    def map(self, va: int, gpa_page: int, flags: int = LEAF_DEFAULT) -> List[Tuple[int, int, int]]:
        """Map ``va`` directly in memory; returns the writes performed."""
        writes = self.plan_map(va, gpa_page, flags)
        for table, index, value in writes:
            self.memory.write32(table, index * 4, value)
        return writes

    def share_directory(self, other_root: int, first_dir: int, last_dir: int = ENTRIES) -> None:
        """Copy directory entries ``[first_dir, last_dir)`` from another root."""
        for d in range(first_dir, last_dir):
            self.memory.write32(self.root, d * 4, self.memory.read32(other_root, d * 4))


class PrivilegedPageTable:
    """The PPT: a computed translation over the privileged address space.

    Maps a snapshot of the guest kernel half (taken at attestation, with the
    driver at its designated address), the device window onto the PGPA device
    pages, the private stacks onto the PGPA pages after them and the slab
    window linearly onto slab memory. The IDT page of the snapshot is left
    not-present so that any interrupt delivered through it faults.

    Parameters
    ----------
    layout
        PPT geometry
    root
        Guest-physical page holding the PPT (in driver read-only data)
    kernel_mappings
        Snapshot of the kernel half, virtual page to (gpa_page, flags)
    idt_va_page
        Virtual page of the guest IDT, kept unmapped
    """

    def __init__(
        self,
        layout: PptLayout,
        root: int,
        kernel_mappings: Dict[int, Tuple[int, int]],
        idt_va_page: Optional[int] = None,
    ) -> None:
        self.layout = layout
        self.root = root
        self.kernel_base_page = layout.kernel_base // PAGE_SIZE
        self._kernel = {
            va: m for va, m in kernel_mappings.items() if va >= self.kernel_base_page and va != idt_va_page
        }
        self.idt_va_page = idt_va_page
        self._device = (layout.device_window[0] // PAGE_SIZE, layout.device_window[1] // PAGE_SIZE)
        self._stack = (
            layout.private_stack_window[0] // PAGE_SIZE,
            layout.private_stack_window[1] // PAGE_SIZE,
        )
        self._slabs = (
            layout.ppt_va_start // PAGE_SIZE,
            (layout.ppt_va_start + layout.max_guests * layout.slab_size) // PAGE_SIZE,
        )

    @classmethod
    def from_kernel_table(
        cls,
        layout: PptLayout,
        root: int,
        kernel_table: GuestPageTable,
        idt_va_page: Optional[int] = None,
    ) -> "PrivilegedPageTable":
        """Snapshot the kernel half of ``kernel_table``."""
        kernel_base_page = layout.kernel_base // PAGE_SIZE
        mappings = {
            m.va_page: (m.gpa_page, m.flags)
            for m in kernel_table.walk().leaves
            if m.va_page >= kernel_base_page
        }
        return cls(layout, root, mappings, idt_va_page)

    def translate_page(self, va_page: int) -> Optional[Tuple[int, int]]:
        """Translate a virtual page to ``(gpa_page, flags)``, or None."""
        if va_page >= self.kernel_base_page:
            return self._kernel.get(va_page)
        data = PTE_PRESENT | PTE_WRITE
        if self._device[0] <= va_page < self._device[1]:
            return self.layout.pgpa_base_page + (va_page - self._device[0]), data
        if self._stack[0] <= va_page < self._stack[1]:
            return (
                self.layout.pgpa_base_page + self.layout.device_pages + (va_page - self._stack[0]),
                data,
            )
        if self._slabs[0] <= va_page < self._slabs[1]:
            return self.layout.pgpa_start_page + (va_page - self._slabs[0]), data
        return None

    def translate(self, va: int) -> Optional[Tuple[int, int]]:
        return self.translate_page(va // PAGE_SIZE)

    def kernel_pages(self) -> Set[int]:
        """Guest-physical pages of the kernel snapshot."""
        return {gpa for gpa, _ in self._kernel.values()}
