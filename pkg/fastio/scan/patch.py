from typing import Iterable, NamedTuple, Optional, Tuple

from fastio.types import PAGE_SIZE, PageData

from .decode import BoundaryResult, Instruction, Known, Unknown, decode_span
from .predicate import DEFAULT_PREDICATE, OpcodePredicate, SequenceHit

INT3 = 0xCC


class EmulationSpec(NamedTuple):
    """Original instructions covered by a patch, used to emulate int3 traps.

    Parameters
    ----------
    instructions
        Decoded original instructions, offsets relative to the patched page
    """

    instructions: Tuple[Instruction, ...]

    def at(self, offset: int) -> Optional[Instruction]:
        """Original instruction starting at ``offset``, if any."""
        for instr in self.instructions:
            if instr.offset == offset:
                return instr
        return None


class PatchRecord(NamedTuple):
    """A planned (or deferred) int3 patch for one predicate hit.

    Offsets are relative to the start of page ``page_index``; offsets at or
    above 4096 address ``successor_page`` (straddling hits only).

    Parameters
    ----------
    page_index
        Guest-physical page holding the first matched byte
    patch_offsets
        Offsets replaced by int3 (empty while deferred)
    original_bytes
        Saved values at ``patch_offsets``
    boundary_status
        ``Known(instr_start)`` or ``Unknown(deferred_exits)``
    emulation_spec
        Original instructions to emulate on trap, or None if not reconstructible
    hit
        The predicate hit this record neutralizes
    successor_page
        Guest-physical page following ``page_index`` for straddling hits
    converted
        Whether a deferred record gave up on its boundary and patched the
        sequence bytes alone
    """

    page_index: int
    patch_offsets: Tuple[int, ...]
    original_bytes: bytes
    boundary_status: BoundaryResult
    emulation_spec: Optional[EmulationSpec]
    hit: SequenceHit
    successor_page: Optional[int] = None
    converted: bool = False

    @property
    def deferred(self) -> bool:
        """Whether the record is waiting for a boundary (nothing patched yet)."""
        return isinstance(self.boundary_status, Unknown) and not self.converted

    @property
    def pages(self) -> Tuple[int, ...]:
        """Guest-physical pages this record touches."""
        if self.successor_page is None or self.successor_page == self.page_index:
            return (self.page_index,)
        return (self.page_index, self.successor_page)

    def page_offsets(self, gpa_page: int) -> Tuple[int, ...]:
        """Patched offsets that fall in ``gpa_page``, relative to that page."""
        offsets: Tuple[int, ...] = ()
        if gpa_page == self.page_index:
            offsets += tuple(o for o in self.patch_offsets if o < PAGE_SIZE)
        if gpa_page == self.successor_page:
            offsets += tuple(o - PAGE_SIZE for o in self.patch_offsets if o >= PAGE_SIZE)
        return offsets


def _check_window(hit: SequenceHit, window: bytes, predicate: OpcodePredicate) -> None:
    current = window[hit.offset : hit.end]
    if current != hit.matched_bytes or not predicate.matches(current):
        raise ValueError(
            f"Stale hit at page {hit.page_index:#x} offset {hit.offset}: expected "
            f"{hit.matched_bytes.hex()}, page holds {current.hex()}"
        )
    if hit.straddles_boundary and len(window) < hit.end:
        raise ValueError(
            f"Straddling hit at page {hit.page_index:#x} offset {hit.offset} needs "
            "the successor page in the window"
        )


def plan_patch(
    hit: SequenceHit,
    boundary: BoundaryResult,
    window: PageData,
    predicate: OpcodePredicate = DEFAULT_PREDICATE,
    successor_page: Optional[int] = None,
) -> PatchRecord:
    """Plan the int3 patch neutralizing a hit.

    With ``Known(s)`` the record patches byte ``s`` (so the instruction that
    contains the hit traps at its start) plus every sequence byte. With
    ``Unknown(n)`` the record is deferred: nothing is patched and the page
    must stay non-executable until :func:`convert_deferred`.

    Parameters
    ----------
    hit
        A hit produced by the scanner on the current content
    boundary
        Result of boundary recovery for the hit
    window
        Current content of the hit's page, followed by the successor page's
        content for straddling hits
    predicate
        Predicate the hit was found with
    successor_page
        Guest-physical page following the hit's page (straddling hits)

    Returns
    -------
    PatchRecord
        The planned record (not yet applied)

    Raises
    ------
    ValueError
        If the hit no longer matches the window (stale hit)

    Examples
    --------
    >>> page = bytearray(4096)
    >>> page[0:5] = bytes([0xB8, 0x0F, 0x20, 0x18, 0x00])
    >>> hit = SequenceHit(0, 1, bytes([0x0F, 0x20, 0x18]), False)
    >>> record = plan_patch(hit, Known(0), page)
    >>> record.patch_offsets
    (0, 1, 2, 3)
    """
    window = bytes(window)
    _check_window(hit, window, predicate)
    if hit.straddles_boundary and successor_page is None:
        raise ValueError(f"Straddling hit at page {hit.page_index:#x} needs a successor page")
    if isinstance(boundary, Unknown):
        return PatchRecord(
            page_index=hit.page_index,
            patch_offsets=(),
            original_bytes=b"",
            boundary_status=boundary,
            emulation_spec=None,
            hit=hit,
            successor_page=successor_page if hit.straddles_boundary else None,
        )
    if not 0 <= boundary.instr_start <= hit.offset:
        raise ValueError(
            f"Instruction start {boundary.instr_start} does not precede hit at {hit.offset}"
        )
    offsets = tuple(sorted({boundary.instr_start, *hit.offsets()}))
    instructions = decode_span(window, boundary.instr_start, hit.end)
    return PatchRecord(
        page_index=hit.page_index,
        patch_offsets=offsets,
        original_bytes=bytes(window[o] for o in offsets),
        boundary_status=Known(boundary.instr_start),
        emulation_spec=EmulationSpec(instructions) if instructions else None,
        hit=hit,
        successor_page=successor_page if hit.straddles_boundary else None,
    )


def convert_deferred(
    record: PatchRecord, window: PageData, predicate: OpcodePredicate = DEFAULT_PREDICATE
) -> PatchRecord:
    """Give up on boundary recovery and patch only the sequence bytes.

    The emulation spec is whatever decodes at the hit itself; cr3 moves always
    decode as three bytes, so the default predicate is always reconstructible.

    Parameters
    ----------
    record
        A deferred record
    window
        Current content of the record's page (plus successor for straddles)
    predicate
        Predicate the hit was found with

    Returns
    -------
    PatchRecord
        A record patching exactly the sequence bytes
    """
    if not record.deferred:
        raise ValueError(f"Record at page {record.page_index:#x} is not deferred")
    window = bytes(window)
    hit = record.hit
    _check_window(hit, window, predicate)
    offsets = hit.offsets()
    instructions = decode_span(window, hit.offset, hit.end)
    return record._replace(
        patch_offsets=offsets,
        original_bytes=bytes(window[o] for o in offsets),
        emulation_spec=EmulationSpec(instructions) if instructions else None,
        converted=True,
    )


def _target(
    offset: int, page: bytearray, successor: Optional[bytearray]
) -> Tuple[bytearray, int]:
    if offset < PAGE_SIZE:
        return page, offset
    if successor is None:
        raise ValueError(f"Patch offset {offset} needs the successor page")
    return successor, offset - PAGE_SIZE


def apply_patch(
    record: PatchRecord, page: bytearray, successor: Optional[bytearray] = None
) -> None:
    """Write int3 at every patch offset (in place)."""
    for offset in record.patch_offsets:
        buf, i = _target(offset, page, successor)
        buf[i] = INT3


def revert_patch(
    record: PatchRecord, page: bytearray, successor: Optional[bytearray] = None
) -> None:
    """Restore the original bytes at every patch offset (in place)."""
    for offset, original in zip(record.patch_offsets, record.original_bytes):
        buf, i = _target(offset, page, successor)
        buf[i] = original


def original_code(
    record: PatchRecord, page: PageData, successor: Optional[PageData] = None
) -> bytes:
    """Reconstruct the pre-patch content of the record's window."""
    window = bytearray(page) + (bytearray(successor) if successor is not None else bytearray())
    for offset, original in zip(record.patch_offsets, record.original_bytes):
        if offset < len(window):
            window[offset] = original
    return bytes(window)


def exclude_offsets(record: PatchRecord, offsets: Iterable[int]) -> PatchRecord:
    """Drop window offsets already patched by another record.

    >>> hit = SequenceHit(0, 1, bytes([0x0F, 0x20, 0x18]), False)
    >>> record = PatchRecord(0, (0, 1, 2, 3), bytes([0xB8, 0x0F, 0x20, 0x18]), Known(0), None, hit)
    >>> exclude_offsets(record, [0]).patch_offsets
    (1, 2, 3)
    """
    skip = set(offsets)
    kept = [(o, b) for o, b in zip(record.patch_offsets, record.original_bytes) if o not in skip]
    return record._replace(
        patch_offsets=tuple(o for o, _ in kept), original_bytes=bytes(b for _, b in kept)
    )
