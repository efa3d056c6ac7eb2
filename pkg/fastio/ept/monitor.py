"""Extended-page-table permissions, exits and the opcode subtraction engine."""
import logging
from collections import defaultdict
from typing import (
    Any,
    DefaultDict,
    Dict,
    Iterable,
    List,
    Mapping as MappingType,
    Optional,
    Set,
    Tuple,
    Union,
)

from fastio.layout import PptLayout, SlabRegistry
from fastio.scan import (
    DEFAULT_PREDICATE,
    INT3,
    BoundaryResult,
    Known,
    OpcodePredicate,
    PatchRecord,
    SequenceHit,
    Unknown,
    apply_patch,
    convert_deferred,
    exclude_offsets,
    find_boundary,
    naive_scan,
    plan_patch,
    revert_patch,
    scan_page,
    scan_pair,
)
from fastio.types import PAGE_SIZE, Config, PageData

from .memory import GuestMemory
from .page_table import ENTRIES, PTE_PRESENT, GuestPageTable, entry_page, leaf_mappings
from .trace import ExitLog
from .types import (
    DRIVER_KINDS,
    PGPA_KINDS,
    RW,
    RX,
    EptEntry,
    ExitEvent,
    ExitReason,
    Granted,
    Mapped,
    PageKind,
    Perm,
    Refused,
    TableCheck,
    TableVerdict,
    Verdict,
)

# (page_index, hit offset, successor page or -1)
RecordKey = Tuple[int, int, int]
Problem = Tuple[TableVerdict, str]

_TABLE_TO_EXIT = {
    TableVerdict.ATTACK_DETECTED: Verdict.ATTACK_DETECTED,
    TableVerdict.GUEST_FAULT: Verdict.GUEST_FAULT,
}


class EptConfig(Config):
    """Settings for the EPT monitor.

    Parameters
    ----------
    deferred_exit_threshold
        Exits a deferred hit may cause before it is patched without a known
        instruction boundary
    ram_pages
        Guest RAM size in pages
    keep_table_protection
        Keep every page table seen since boot write-protected; if False,
        :meth:`EptMonitor.release_unreachable` lifts protection from tables no
        longer reachable from an active root
    """

    deferred_exit_threshold: int = 64
    ram_pages: int = 65536
    keep_table_protection: bool = True


class EptMonitor:
    """Per-guest EPT state and the hypervisor's exit handlers.

    Every guest-physical page has an :class:`EptEntry`; RAM pages start as
    readable and writable, privileged (PGPA) pages as not present. Once
    subtraction is active, Execute is only granted to a page after it and its
    executable virtual neighbours have been scanned and every predicate match
    patched with int3 (or deferred until its instruction boundary is known).

    Parameters
    ----------
    memory
        Guest-physical memory
    layout
        PPT geometry (locates the PGPA region)
    registry
        Slab registrations, used to back slab pages on demand
    predicate
        The subtracted opcode predicate
    log
        Exit log shared with the CPU (a new one if None)
    """

    def __init__(
        self,
        memory: GuestMemory,
        layout: PptLayout = PptLayout(),
        registry: Optional[SlabRegistry] = None,
        predicate: OpcodePredicate = DEFAULT_PREDICATE,
        log: Optional[ExitLog] = None,
        **kwargs: Any,
    ) -> None:
        self.config = EptConfig(**kwargs)  # type: ignore
        if self.config.deferred_exit_threshold < 1:
            raise ValueError(
                f"deferred_exit_threshold must be at least 1, got {self.config.deferred_exit_threshold}"
            )
        if memory.ram_pages > layout.pgpa_base_page:
            raise ValueError(
                f"{memory.ram_pages} RAM pages overlap the PGPA region at page {layout.pgpa_base_page:#x}"
            )
        self.memory = memory
        self.layout = layout
        self.registry = registry
        self.predicate = predicate.validate()
        self.log = log if log is not None else ExitLog()
        self.subtraction_active = False
        self.records: Dict[RecordKey, PatchRecord] = {}
        self._entries: Dict[int, EptEntry] = {}
        # gpa_page -> {offset: (owning record, original byte)}
        self._patched: DefaultDict[int, Dict[int, Tuple[RecordKey, int]]] = defaultdict(dict)
        self._known_eips: DefaultDict[int, Set[int]] = defaultdict(set)
        self._rescan: Set[int] = set()
        self._designated: Dict[int, int] = {}
        self._roots: Dict[int, Set[int]] = {}
        self._dir_of: DefaultDict[int, Set[Tuple[int, int]]] = defaultdict(set)
        self._va_maps: Dict[int, Dict[int, int]] = {}
        self._gpa_vas: DefaultDict[int, Set[Tuple[int, int]]] = defaultdict(set)

    # Entries

    def entry(self, gpa_page: int) -> EptEntry:
        """Current EPT entry of ``gpa_page``."""
        e = self._entries.get(gpa_page)
        if e is not None:
            return e
        if self.memory.is_ram(gpa_page):
            return EptEntry(gpa_page, True, RW, self.memory.backing(gpa_page))
        if self.layout.pgpa_base_page <= gpa_page < self.layout.pgpa_start_page:
            return EptEntry(gpa_page, False, Perm.NONE, None, PageKind.PGPA_DEVICE)
        if self.layout.pgpa_start_page <= gpa_page < self.layout.pgpa_end_page:
            return EptEntry(gpa_page, False, Perm.NONE, None, PageKind.PGPA_SLAB)
        return EptEntry(gpa_page, False, Perm.NONE, None)

    def entries(self) -> List[EptEntry]:
        """Entries that differ from the RAM default, by page."""
        return [self._entries[g] for g in sorted(self._entries)]

    def _set(self, gpa_page: int, **changes: object) -> EptEntry:
        e = self.entry(gpa_page)._replace(**changes)
        if e.writable and e.executable:
            raise ValueError(f"Page {gpa_page:#x} cannot be both writable and executable")
        self._entries[gpa_page] = e
        return e

    def _park(self, gpa_page: int) -> None:
        """Take Execute away, leaving the page read-only until it is written or rescanned."""
        if self.entry(gpa_page).kind is PageKind.NORMAL:
            self._set(gpa_page, perms=Perm.READ)

    def _emit(self, event: ExitEvent) -> ExitEvent:
        logging.debug(f"exit {event.reason.value} -> {event.verdict.value} page={event.gpa_page}")
        return self.log.append(event)

    def executable_pages(self) -> List[int]:
        """Non-driver pages currently holding Execute."""
        return sorted(
            g for g, e in self._entries.items() if e.executable and e.kind is PageKind.NORMAL
        )

    def _scannable(self, gpa_page: int) -> bool:
        e = self.entry(gpa_page)
        return e.executable and e.kind is PageKind.NORMAL

    # Driver load

    def protect_driver(
        self,
        code_pages: Iterable[int],
        read_only_pages: Iterable[int],
        designated_vas: MappingType[int, int],
    ) -> None:
        """Write-protect the driver and record where it may be mapped.

        Parameters
        ----------
        code_pages
            Driver code pages (become read and execute)
        read_only_pages
            Driver read-only data pages, the PPT among them (become read only)
        designated_vas
            Virtual page each driver page must be mapped at

        Raises
        ------
        ValueError
            If a page is not RAM or lacks a designated address
        """
        code_pages, read_only_pages = list(code_pages), list(read_only_pages)
        for gpa in code_pages + read_only_pages:
            if not self.memory.is_ram(gpa):
                raise ValueError(f"Driver page {gpa:#x} is not guest RAM")
            if gpa not in designated_vas:
                raise ValueError(f"Driver page {gpa:#x} has no designated virtual address")
        self._invalidate(code_pages + read_only_pages)
        for gpa in code_pages:
            self._set(gpa, perms=RX, kind=PageKind.DRIVER_CODE)
        for gpa in read_only_pages:
            self._set(gpa, perms=Perm.READ, kind=PageKind.DRIVER_READ_ONLY)
        self._designated.update({int(g): int(v) for g, v in designated_vas.items()})
        logging.info(
            f"Protected driver: {len(code_pages)} code pages, {len(read_only_pages)} read-only pages"
        )

    def activate_subtraction(self) -> int:
        """Revoke Execute from every page except driver code; returns pages revoked."""
        revoked = 0
        for gpa in self.executable_pages():
            self._set(gpa, perms=RW)
            revoked += 1
        self.subtraction_active = True
        logging.info(f"Opcode subtraction active ({revoked} pages lost Execute)")
        return revoked

    def map_device_window(self) -> int:
        """Back the PGPA device and private-stack pages; returns pages mapped."""
        n = self.layout.device_pages + self.layout.cpus * self.layout.private_stack_pages
        for i in range(n):
            gpa = self.layout.pgpa_base_page + i
            self._set(gpa, present=True, perms=RW, backing=gpa, kind=PageKind.PGPA_DEVICE)
        return n

    # Patch bookkeeping

    def note_eip(self, gpa_page: int, offset: int) -> None:
        """Record a known instruction start (a faulting eip) on ``gpa_page``."""
        if not 0 <= offset < PAGE_SIZE:
            raise ValueError(f"Instruction offset {offset} outside the page")
        self._known_eips[gpa_page].add(offset)

    def original_page(self, gpa_page: int) -> bytes:
        """Page content with every int3 patch undone."""
        page = bytearray(self.memory.page(gpa_page))
        for offset, (_, original) in self._patched.get(gpa_page, {}).items():
            page[offset] = original
        return bytes(page)

    def original_window(self, gpa_page: int, successor: Optional[int] = None) -> bytes:
        window = self.original_page(gpa_page)
        if successor is not None:
            window += self.original_page(successor)
        return window

    def record_at(self, gpa_page: int, offset: int) -> Optional[PatchRecord]:
        """Record owning the int3 at ``offset`` of ``gpa_page``, if the monitor placed it."""
        owner = self._patched.get(gpa_page, {}).get(offset)
        if owner is None:
            return None
        return self.records[owner[0]]

    def is_deferred(self, gpa_page: int) -> bool:
        """Whether a deferred hit keeps ``gpa_page`` from executing."""
        return any(r.deferred and gpa_page in r.pages for r in self.records.values())

    def needs_rescan(self, gpa_page: int) -> bool:
        return gpa_page in self._rescan

    def patched_bytes(self) -> int:
        return sum(len(offsets) for offsets in self._patched.values())

    def _records_touching(self, gpa_page: int) -> List[RecordKey]:
        return [k for k, r in self.records.items() if gpa_page in r.pages]

    @staticmethod
    def _locate(record: PatchRecord, offset: int) -> Tuple[int, int]:
        """Page and page offset of a window offset of ``record``."""
        if offset < PAGE_SIZE:
            return record.page_index, offset
        return record.successor_page, offset - PAGE_SIZE  # type: ignore

    def _install(self, key: RecordKey, record: PatchRecord) -> int:
        """Apply a planned record, skipping bytes other records already own."""
        owned = []
        for o in record.patch_offsets:
            gpa, page_offset = self._locate(record, o)
            owner = self._patched.get(gpa, {}).get(page_offset)
            if owner is not None and owner[0] != key:
                owned.append(o)
        record = exclude_offsets(record, owned)
        successor = None if record.successor_page is None else self.memory.page(record.successor_page)
        apply_patch(record, self.memory.page(record.page_index), successor)
        for offset, original in zip(record.patch_offsets, record.original_bytes):
            gpa, page_offset = self._locate(record, offset)
            self._patched[gpa][page_offset] = (key, original)
        self.records[key] = record
        return len(record.patch_offsets)

    def _revert(self, key: RecordKey) -> None:
        record = self.records.pop(key)
        successor = None if record.successor_page is None else self.memory.page(record.successor_page)
        revert_patch(record, self.memory.page(record.page_index), successor)
        for gpa in record.pages:
            for o in record.page_offsets(gpa):
                del self._patched[gpa][o]
            if not self._patched[gpa]:
                del self._patched[gpa]

    def _invalidate(self, pages: Iterable[int]) -> int:
        """Revert every record touching ``pages``, cascading along straddles.

        Pages reached through a straddle lose Execute as well, so they are
        rescanned before running again. Returns the number of records reverted.
        """
        pending = list(pages)
        first = set(pending)
        seen: Set[int] = set()
        reverted = 0
        while pending:
            gpa = pending.pop()
            if gpa in seen:
                continue
            seen.add(gpa)
            if gpa not in first and self._scannable(gpa):
                self._set(gpa, perms=RW)
            for key in self._records_touching(gpa):
                record = self.records[key]
                self._revert(key)
                reverted += 1
                pending.extend(p for p in record.pages if p not in seen)
        return reverted

    def _recover_boundary(self, window: bytes, hit: SequenceHit) -> BoundaryResult:
        for eip in sorted((e for e in self._known_eips.get(hit.page_index, ()) if e <= hit.offset), reverse=True):
            result = find_boundary(window, eip, hit.offset)
            if isinstance(result, Known):
                return result
        return Unknown()

    def _neutralize(self, hit: SequenceHit, successor: Optional[int], attempt: bool) -> int:
        """Patch ``hit`` or advance its deferred state; returns bytes newly patched.

        ``attempt`` marks an execution attempt on a page the hit blocks, which
        counts toward the deferred-exit threshold.
        """
        key = (hit.page_index, hit.offset, -1 if successor is None else successor)
        record = self.records.get(key)
        if record is not None and not record.deferred:
            return 0
        window = self.original_window(hit.page_index, successor)
        boundary = self._recover_boundary(window, hit)
        if isinstance(boundary, Known):
            if record is not None:
                logging.debug(
                    f"Boundary of hit at {hit.page_index:#x}+{hit.offset} recovered after "
                    f"{record.boundary_status.deferred_exits} deferred exits"  # type: ignore
                )
            return self._install(key, plan_patch(hit, boundary, window, self.predicate, successor))
        if record is None:
            record = plan_patch(hit, Unknown(1 if attempt else 0), window, self.predicate, successor)
        elif attempt:
            count = record.boundary_status.deferred_exits + 1  # type: ignore
            record = record._replace(boundary_status=Unknown(count))
        if record.boundary_status.deferred_exits >= self.config.deferred_exit_threshold:  # type: ignore
            logging.info(
                f"Hit at {hit.page_index:#x}+{hit.offset} reached {self.config.deferred_exit_threshold} "
                "deferred exits, patching the sequence bytes"
            )
            return self._install(key, convert_deferred(record, window, self.predicate))
        self.records[key] = record
        return 0

    # Adjacency

    def _map(self, root: int, va_page: int, gpa_page: int) -> None:
        self._va_maps.setdefault(root, {})[va_page] = gpa_page
        self._gpa_vas[gpa_page].add((root, va_page))

    def _unmap(self, root: int, va_page: int) -> None:
        gpa = self._va_maps.get(root, {}).pop(va_page, None)
        if gpa is not None:
            self._gpa_vas[gpa].discard((root, va_page))
            if not self._gpa_vas[gpa]:
                del self._gpa_vas[gpa]

    def _forget_root(self, root: int) -> None:
        for va in list(self._va_maps.get(root, {})):
            self._unmap(root, va)
        self._va_maps.pop(root, None)
        for table in self._roots.pop(root, set()):
            self._dir_of[table] = {(r, d) for r, d in self._dir_of[table] if r != root}
            if not self._dir_of[table]:
                del self._dir_of[table]

    def predecessors(self, gpa_page: int) -> Set[int]:
        """Pages mapped right before ``gpa_page`` in any protected table."""
        return {
            self._va_maps[root][va - 1]
            for root, va in self._gpa_vas.get(gpa_page, ())
            if va - 1 in self._va_maps[root]
        }

    def successors(self, gpa_page: int) -> Set[int]:
        """Pages mapped right after ``gpa_page`` in any protected table."""
        return {
            self._va_maps[root][va + 1]
            for root, va in self._gpa_vas.get(gpa_page, ())
            if va + 1 in self._va_maps[root]
        }

    def adjacent_pairs(self) -> Set[Tuple[int, int]]:
        """Every ``(predecessor, successor)`` page pair that is virtually adjacent somewhere."""
        pairs = set()
        for va_map in self._va_maps.values():
            for va, gpa in va_map.items():
                nxt = va_map.get(va + 1)
                if nxt is not None:
                    pairs.add((gpa, nxt))
        return pairs

    def _scan_adjacency(self, predecessor: int, successor: int) -> int:
        """Patch matches straddling two executable pages that just became adjacent.

        A straddle whose boundary is unknown takes Execute away from the
        successor until it is resolved.
        """
        if not (self._scannable(predecessor) and self._scannable(successor)):
            return 0
        hits = scan_pair(
            self.original_page(predecessor),
            self.original_page(successor),
            self.predicate,
            page_index=predecessor,
        )
        patched = 0
        for hit in hits:
            patched += self._neutralize(hit, successor, attempt=False)
            if self.records[(predecessor, hit.offset, successor)].deferred:
                self._park(successor)
        return patched

    def _new_pairs(self, added: Iterable[Tuple[int, int, int]]) -> Set[Tuple[int, int]]:
        pairs = set()
        for root, va, gpa in added:
            va_map = self._va_maps.get(root, {})
            if va - 1 in va_map:
                pairs.add((va_map[va - 1], gpa))
            if va + 1 in va_map:
                pairs.add((gpa, va_map[va + 1]))
        return pairs

    # Exit handlers

    def request_execute(
        self, gpa_page: int, eip_offset: Optional[int] = None
    ) -> Union[Granted, ExitEvent]:
        """Handle an execute violation on ``gpa_page``.

        Scans the page and its executable virtual neighbours, patching every
        match before Execute is granted. A page blocked by a deferred hit stays
        non-executable; the returned event tells the CPU to emulate one
        instruction.

        Parameters
        ----------
        gpa_page
            Page the guest tried to execute
        eip_offset
            Page offset of the faulting instruction, a known instruction start

        Returns
        -------
        Union[Granted, ExitEvent]
            Granted (the page is executable), or the exit with verdict Emulated
            (deferred) or GuestFault (the page may never execute)
        """
        context: Dict[str, object] = {}
        if eip_offset is not None:
            self.note_eip(gpa_page, eip_offset)
            context["eip"] = eip_offset
        entry = self.entry(gpa_page)
        if entry.executable:
            return Granted(gpa_page)
        if not entry.present or entry.kind is not PageKind.NORMAL:
            return self._emit(
                ExitEvent.make(
                    ExitReason.EPT_EXEC_VIOLATION,
                    Verdict.GUEST_FAULT,
                    gpa_page,
                    kind=entry.kind.value,
                    **context,
                )
            )
        if not self.subtraction_active:
            self._set(gpa_page, perms=RX)
            self._emit(
                ExitEvent.make(ExitReason.EPT_EXEC_VIOLATION, Verdict.RESUMED, gpa_page, patched=0, **context)
            )
            return Granted(gpa_page)
        self._set(gpa_page, perms=Perm.READ)
        original = self.original_page(gpa_page)
        found: List[Tuple[SequenceHit, Optional[int]]] = [
            (h, None) for h in scan_page(original, self.predicate, page_index=gpa_page)
        ]
        for pred in sorted(self.predecessors(gpa_page)):
            if pred != gpa_page and self._scannable(pred):
                hits = scan_pair(self.original_page(pred), original, self.predicate, page_index=pred)
                found.extend((h, gpa_page) for h in hits)
        for succ in sorted(self.successors(gpa_page)):
            if succ == gpa_page or self._scannable(succ):
                hits = scan_pair(original, self.original_page(succ), self.predicate, page_index=gpa_page)
                found.extend((h, succ) for h in hits)
        patched = sum(self._neutralize(hit, succ, attempt=True) for hit, succ in found)
        blocked = sum(1 for r in self.records.values() if r.deferred and gpa_page in r.pages)
        if blocked:
            return self._emit(
                ExitEvent.make(
                    ExitReason.EPT_EXEC_VIOLATION,
                    Verdict.EMULATED,
                    gpa_page,
                    deferred=blocked,
                    patched=patched,
                    **context,
                )
            )
        self._set(gpa_page, perms=RX)
        self._rescan.discard(gpa_page)
        self._emit(
            ExitEvent.make(
                ExitReason.EPT_EXEC_VIOLATION, Verdict.RESUMED, gpa_page, patched=patched, **context
            )
        )
        return Granted(gpa_page, patched)

    def write_access(self, gpa_page: int, offset: int = 0, value: Optional[int] = None) -> ExitEvent:
        """Handle a write violation on ``gpa_page``.

        Executable code pages turn back into data (records reverted, rescan on
        the next execute); page-table writes are emulated through
        :meth:`handle_pt_write`; writes to driver or PGPA pages are attacks.

        Parameters
        ----------
        gpa_page
            Page written
        offset
            Byte offset of the write
        value
            The 32-bit entry written (page-table pages only)

        Raises
        ------
        ValueError
            If the page is already writable (no exit occurs), or a page-table
            write carries no value
        """
        entry = self.entry(gpa_page)
        context = {"kind": entry.kind.value, "offset": offset}
        if entry.kind in DRIVER_KINDS or entry.kind in PGPA_KINDS:
            logging.warning(f"Guest wrote {entry.kind.value} page {gpa_page:#x}")
            return self._emit(
                ExitEvent.make(ExitReason.EPT_WRITE_VIOLATION, Verdict.ATTACK_DETECTED, gpa_page, **context)
            )
        if not entry.present:
            return self._emit(
                ExitEvent.make(ExitReason.EPT_WRITE_VIOLATION, Verdict.GUEST_FAULT, gpa_page, **context)
            )
        if entry.kind is PageKind.GUEST_PAGE_TABLE:
            if value is None:
                raise ValueError(f"Write to page-table page {gpa_page:#x} needs the entry value")
            return self.handle_pt_write(gpa_page, offset // 4, value)
        if entry.writable:
            raise ValueError(f"Page {gpa_page:#x} is writable, the write does not exit")
        reverted = self._invalidate([gpa_page])
        self._set(gpa_page, perms=RW)
        self._rescan.add(gpa_page)
        self._known_eips.pop(gpa_page, None)
        return self._emit(
            ExitEvent.make(
                ExitReason.EPT_WRITE_VIOLATION, Verdict.RESUMED, gpa_page, reverted=reverted, **context
            )
        )

    def guest_write(self, gpa_page: int, offset: int, data: PageData) -> Optional[ExitEvent]:
        """Perform a guest write, taking a write exit if the page is protected.

        Returns the exit (None if the write went straight through). The bytes
        land in memory unless the exit refused them.
        """
        data = bytes(data)
        entry = self.entry(gpa_page)
        if entry.present and entry.writable and entry.kind is PageKind.NORMAL:
            self.memory.write(gpa_page, offset, data)
            return None
        if entry.kind is PageKind.GUEST_PAGE_TABLE:
            if len(data) != 4 or offset % 4:
                raise ValueError(f"Page-table write of {len(data)} bytes at offset {offset} is not one entry")
            return self.write_access(gpa_page, offset, int.from_bytes(data, "little"))
        if entry.present and entry.writable:
            return self.write_access(gpa_page, offset)
        event = self.write_access(gpa_page, offset)
        if event.verdict is Verdict.RESUMED:
            self.memory.write(gpa_page, offset, data)
        return event

    def _check_leaf(self, va_page: int, gpa_page: int) -> Optional[Problem]:
        if gpa_page >= self.layout.pgpa_base_page:
            return TableVerdict.ATTACK_DETECTED, f"va {va_page << 12:#x} maps privileged page {gpa_page:#x}"
        if not self.memory.is_ram(gpa_page):
            return TableVerdict.GUEST_FAULT, f"va {va_page << 12:#x} maps nonexistent page {gpa_page:#x}"
        designated = self._designated.get(gpa_page)
        if designated is not None and designated != va_page:
            return (
                TableVerdict.ATTACK_DETECTED,
                f"driver page {gpa_page:#x} mapped at {va_page << 12:#x}, not {designated << 12:#x}",
            )
        return None

    def _check_table_page(self, table: int) -> Optional[Problem]:
        if table >= self.layout.pgpa_base_page:
            return TableVerdict.ATTACK_DETECTED, f"table page {table:#x} is privileged"
        if not self.memory.is_ram(table):
            return TableVerdict.GUEST_FAULT, f"table page {table:#x} does not exist"
        if table in self._designated:
            return TableVerdict.ATTACK_DETECTED, f"table page {table:#x} is a driver page"
        return None

    def _shield(self, table: int) -> None:
        if self.entry(table).kind is not PageKind.GUEST_PAGE_TABLE:
            self._invalidate([table])
            self._set(table, perms=Perm.READ, kind=PageKind.GUEST_PAGE_TABLE)

    def protect_page_tables(self, root: int) -> TableCheck:
        """Walk and write-protect the table rooted at ``root`` (a cr3-load exit).

        Returns AttackDetected if any entry reaches a PGPA page or maps a
        driver page away from its designated address, GuestFault if an entry
        references a nonexistent page, Ok otherwise. On Ok every table page
        becomes a read-only GuestPageTable page and straddles between newly
        adjacent executable pages are patched.
        """
        problem = self._check_table_page(root)
        if problem is not None:
            return TableCheck(problem[0], root, (root,), problem[1])
        walk = GuestPageTable(self.memory, root).walk()
        problems: List[Problem] = []
        for _, _, gpa in walk.missing:
            problems.append(self._check_table_page(gpa))  # type: ignore
        problems.extend(p for p in map(self._check_table_page, walk.table_pages) if p is not None)
        problems.extend(p for p in (self._check_leaf(m.va_page, m.gpa_page) for m in walk.leaves) if p is not None)
        if problems:
            attacks = [p for p in problems if p[0] is TableVerdict.ATTACK_DETECTED]
            verdict, detail = (attacks or problems)[0]
            if attacks:
                logging.warning(f"Page table {root:#x} rejected: {detail}")
            return TableCheck(verdict, root, walk.table_pages, detail)
        for table in walk.table_pages:
            self._shield(table)
        self._forget_root(root)
        self._roots[root] = set(walk.table_pages)
        for d, table in walk.directory:
            self._dir_of[table].add((root, d))
        for m in walk.leaves:
            self._map(root, m.va_page, m.gpa_page)
        va_map = self._va_maps.get(root, {})
        for va, gpa in sorted(va_map.items()):
            if va + 1 in va_map:
                self._scan_adjacency(gpa, va_map[va + 1])
        return TableCheck(TableVerdict.OK, root, walk.table_pages)

    def handle_cr3_load(self, root: int, **context: Any) -> Tuple[ExitEvent, TableCheck]:
        """Log a cr3-load exit for ``root`` and validate the table it loads."""
        check = self.protect_page_tables(root)
        if check.ok:
            verdict = Verdict.RESUMED
        else:
            verdict = _TABLE_TO_EXIT[check.verdict]
            context["detail"] = check.detail
        event = self._emit(ExitEvent.make(ExitReason.CR3_LOAD_EXIT, verdict, root, **context))
        return event, check

    def protected_roots(self) -> List[int]:
        return sorted(self._roots)

    def table_pages(self) -> Set[int]:
        """Every page of every protected table."""
        return set().union(*self._roots.values()) if self._roots else set()

    def _validate_pt_write(self, gpa_page: int, index: int, value: int) -> Optional[Problem]:
        if not value & PTE_PRESENT:
            return None
        target = entry_page(value)
        if gpa_page in self._roots:
            problem = self._check_table_page(target)
            if problem is not None:
                return problem
            for m in leaf_mappings(self.memory, target, index):
                problem = self._check_leaf(m.va_page, m.gpa_page)
                if problem is not None:
                    return problem
        for _, d in self._dir_of.get(gpa_page, ()):
            problem = self._check_leaf(d * ENTRIES + index, target)
            if problem is not None:
                return problem
        return None

    def handle_pt_write(self, gpa_page: int, entry_index: int, new_value: int) -> ExitEvent:
        """Emulate a guest write to a protected page-table page.

        The new entry is validated as the cr3-load walk would validate it. On
        success the write is applied and any executable page it places next to
        another executable page is scanned for straddling matches.

        Raises
        ------
        ValueError
            If ``gpa_page`` is not a protected table page or the index is out of range
        """
        if self.entry(gpa_page).kind is not PageKind.GUEST_PAGE_TABLE:
            raise ValueError(f"Page {gpa_page:#x} is not a protected page table")
        if not 0 <= entry_index < ENTRIES:
            raise ValueError(f"Entry index {entry_index} out of range [0, {ENTRIES})")
        context = {"kind": PageKind.GUEST_PAGE_TABLE.value, "index": entry_index, "value": new_value}
        problem = self._validate_pt_write(gpa_page, entry_index, new_value)
        if problem is not None:
            verdict, detail = problem
            if verdict is TableVerdict.ATTACK_DETECTED:
                logging.warning(f"Page-table write rejected: {detail}")
            return self._emit(
                ExitEvent.make(
                    ExitReason.EPT_WRITE_VIOLATION, _TABLE_TO_EXIT[verdict], gpa_page, detail=detail, **context
                )
            )
        old = self.memory.read32(gpa_page, entry_index * 4)
        self.memory.write32(gpa_page, entry_index * 4, new_value)
        added: List[Tuple[int, int, int]] = []
        if gpa_page in self._roots:
            root = gpa_page
            if old & PTE_PRESENT:
                self._dir_of[entry_page(old)].discard((root, entry_index))
                for va in range(entry_index * ENTRIES, (entry_index + 1) * ENTRIES):
                    self._unmap(root, va)
            if new_value & PTE_PRESENT:
                table = entry_page(new_value)
                self._shield(table)
                self._roots[root].add(table)
                self._dir_of[table].add((root, entry_index))
                for m in leaf_mappings(self.memory, table, entry_index):
                    self._map(root, m.va_page, m.gpa_page)
                    added.append((root, m.va_page, m.gpa_page))
        for root, d in list(self._dir_of.get(gpa_page, ())):
            va = d * ENTRIES + entry_index
            self._unmap(root, va)
            if new_value & PTE_PRESENT:
                self._map(root, va, entry_page(new_value))
                added.append((root, va, entry_page(new_value)))
        patched = sum(self._scan_adjacency(p, s) for p, s in sorted(self._new_pairs(added)))
        return self._emit(
            ExitEvent.make(
                ExitReason.EPT_WRITE_VIOLATION, Verdict.EMULATED, gpa_page, patched=patched, **context
            )
        )

    def release_unreachable(self, active_roots: Iterable[int]) -> int:
        """Lift protection from tables no active root reaches; returns pages released.

        Does nothing while ``keep_table_protection`` is set.
        """
        if self.config.keep_table_protection:
            return 0
        active = set(active_roots)
        keep: Set[int] = set()
        for root in active:
            keep |= self._roots.get(root, set())
        released = 0
        for root in [r for r in self._roots if r not in active]:
            pages = self._roots[root]
            self._forget_root(root)
            for table in pages - keep:
                if table not in self.table_pages():
                    self._set(table, perms=RW, kind=PageKind.NORMAL)
                    released += 1
        logging.debug(f"Released {released} page-table pages")
        return released

    def map_pgpa_on_demand(self, gpa_page: int, privileged: bool) -> Union[Mapped, Refused, ExitEvent]:
        """Back a slab page on first touch through the PPT.

        Parameters
        ----------
        gpa_page
            Slab page in ``[pgpa_start, pgpa_start + max_guests * slab_size)``
        privileged
            Whether the access came through the PPT

        Returns
        -------
        Union[Mapped, Refused, ExitEvent]
            Mapped with the registered backing page, Refused if the slab (or
            that page of it) is unregistered, or an AttackDetected exit if the
            access did not come through the PPT

        Raises
        ------
        ValueError
            If the page lies outside the slab region
        """
        guest_id, page = self.layout.pgpa_slab_owner(gpa_page)
        if not privileged:
            logging.warning(f"Guest touched slab page {gpa_page:#x} outside the PPT")
            return self._emit(
                ExitEvent.make(
                    ExitReason.NOT_PRESENT_FAULT, Verdict.ATTACK_DETECTED, gpa_page, guest_id=guest_id, page=page
                )
            )
        entry = self.entry(gpa_page)
        if entry.present:
            return Mapped(gpa_page, entry.backing)  # type: ignore
        backing = None if self.registry is None else self.registry.backing_for_pgpa(gpa_page)
        if backing is None:
            self._emit(
                ExitEvent.make(
                    ExitReason.NOT_PRESENT_FAULT, Verdict.GUEST_FAULT, gpa_page, guest_id=guest_id, page=page
                )
            )
            return Refused(gpa_page, f"slab page {page} of guest {guest_id} is not registered")
        self._set(gpa_page, present=True, perms=RW, backing=backing)
        self._emit(
            ExitEvent.make(ExitReason.NOT_PRESENT_FAULT, Verdict.RESUMED, gpa_page, guest_id=guest_id, page=page)
        )
        return Mapped(gpa_page, backing)

    def release_slab(self, guest_id: int) -> int:
        """Unmap every backed page of ``guest_id``'s slab; returns pages unmapped."""
        first = self.layout.slab_gpa_page(guest_id, 0)
        released = 0
        for gpa in range(first, first + self.layout.slab_pages):
            if gpa in self._entries:
                del self._entries[gpa]
                released += 1
        return released

    # Audits

    def audit_wx(self) -> List[int]:
        """Pages holding Write and Execute together."""
        return sorted(g for g, e in self._entries.items() if e.writable and e.executable)

    def audit_subtraction(self) -> List[Tuple[int, int, int]]:
        """Live predicate matches reachable by execution, found by brute force.

        Returns ``(page, offset, successor)`` for every match inside an
        executable page (successor -1) or straddling an executable adjacent pair.
        """
        violations = []
        for gpa in self.executable_pages():
            violations.extend((gpa, o, -1) for o in naive_scan(self.memory.page(gpa), self.predicate))
        tail = self.predicate.length - 1
        for pred, succ in sorted(self.adjacent_pairs()):
            if self._scannable(pred) and self._scannable(succ):
                window = bytes(self.memory.page(pred)[-tail:]) + bytes(self.memory.page(succ)[:tail])
                violations.extend(
                    (pred, PAGE_SIZE - tail + o, succ) for o in naive_scan(window, self.predicate)
                )
        return violations

    def audit_table_shielding(self) -> List[int]:
        """Pages of protected tables that are writable or not marked as tables."""
        exposed = set()
        for root in self._roots:
            for table in GuestPageTable(self.memory, root).walk().table_pages:
                e = self.entry(table)
                if e.writable or e.kind is not PageKind.GUEST_PAGE_TABLE:
                    exposed.add(table)
        return sorted(exposed)

    def audit_patches(self) -> List[str]:
        """Bookkeeping problems between records and live int3 bytes."""
        problems = []
        for gpa, offsets in self._patched.items():
            page = self.memory.page(gpa)
            for o in offsets:
                if page[o] != INT3:
                    problems.append(f"page {gpa:#x} offset {o} holds {page[o]:#04x}, not int3")
        expected = sum(len(r.patch_offsets) for r in self.records.values())
        if expected != self.patched_bytes():
            problems.append(f"{self.patched_bytes()} patched bytes, records claim {expected}")
        return problems

    def stats(self) -> Dict[str, int]:
        """Summary counts for reports."""
        return {
            "records": len(self.records),
            "deferred": sum(1 for r in self.records.values() if r.deferred),
            "patched_bytes": self.patched_bytes(),
            "executable_pages": len(self.executable_pages()),
            "protected_roots": len(self._roots),
            "table_pages": len(self.table_pages()),
        }
