"""Randomized EPT event sequences with a final audit of the monitor's invariants."""
import logging
from collections import OrderedDict
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from fastio.layout import PptLayout
from fastio.synthetic import generate_code_page, generate_straddle_pair
from fastio.types import PAGE_SIZE, Config
from fastio.utils import Logger, derive_seed

from .memory import GuestMemory
from .monitor import EptMonitor
from .page_table import PTE_EXEC, PTE_PRESENT, GuestPageTable, PageTableBuilder, make_entry, split_va
from .trace import ExitLog
from .types import ExitEvent

EXECUTE = "execute"
WRITE = "write"
PT_WRITE = "pt-write"
CR3_LOAD = "cr3"
EVENT_KINDS = (EXECUTE, WRITE, PT_WRITE, CR3_LOAD)

VA_BASE = 0x400000


class FuzzConfig(Config):
    """Settings for a fuzz run.

    Parameters
    ----------
    n_events
        Number of random events
    seed
        Seed for the world and the event stream
    n_pages
        Code pages in the guest
    n_roots
        Page tables mapping those pages (in different orders)
    plant_rate
        Fraction of code pages with planted predicate matches
    pgpa_rate
        Fraction of page-table writes aimed at privileged pages
    mix
        Relative weights of execute, write, pt-write and cr3-load events
    deferred_exit_threshold
        Deferred exits before a hit is patched blind
    log_freq
        Events between progress log lines (0 disables)
    """

    n_events: int = 1000
    seed: int = 0
    n_pages: int = 24
    n_roots: int = 3
    plant_rate: float = 0.5
    pgpa_rate: float = 0.05
    mix: Tuple[float, float, float, float] = (0.4, 0.25, 0.2, 0.15)
    deferred_exit_threshold: int = 64
    log_freq: int = 0


class FuzzEvent(NamedTuple):
    """One guest action.

    Parameters
    ----------
    kind
        ``execute``, ``write``, ``pt-write`` or ``cr3``
    target
        Code page (execute, write) or root index (pt-write, cr3)
    offset
        Instruction offset (execute, -1 if unknown), byte offset (write) or
        virtual slot (pt-write)
    value
        New entry value (pt-write)
    data
        Bytes written (write)
    """

    kind: str
    target: int
    offset: int = 0
    value: int = 0
    data: bytes = b""

    def to_dict(self) -> Dict[str, Any]:
        d = self._asdict()
        d["data"] = self.data.hex()
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "FuzzEvent":
        return cls(d["kind"], d["target"], d["offset"], d["value"], bytes.fromhex(d["data"]))


class FuzzWorld(NamedTuple):
    monitor: EptMonitor
    code_pages: Tuple[int, ...]
    roots: Tuple[int, ...]


class FuzzResult(NamedTuple):
    events: List[FuzzEvent]
    log: ExitLog
    audit: pd.DataFrame

    @property
    def breaches(self) -> int:
        return int(self.audit["violations"].sum())


def build_world(config: FuzzConfig) -> FuzzWorld:
    """Guest memory with code pages, protected page tables and subtraction active."""
    rng = np.random.RandomState(derive_seed(config.seed, "world"))
    layout = PptLayout()
    memory = GuestMemory(ram_pages=0x100 + 8 * config.n_pages + 64)
    monitor = EptMonitor(memory, layout, deferred_exit_threshold=config.deferred_exit_threshold)
    pages = [memory.alloc_page() for _ in range(config.n_pages)]
    for gpa in pages:
        n_plants = rng.randint(1, 4) if rng.rand() < config.plant_rate else 0
        content, _ = generate_code_page(rng, n_plants)
        memory.write(gpa, 0, content)
    # straddling matches across consecutive pages of the first table
    for i in range(0, config.n_pages - 1, 4):
        pred, succ = generate_straddle_pair(rng, split=1 + rng.randint(2))
        memory.write(pages[i], PAGE_SIZE - 2, pred[-2:])
        memory.write(pages[i + 1], 0, succ[:2])
    monitor.activate_subtraction()
    roots = []
    for r in range(config.n_roots):
        builder = PageTableBuilder(memory)
        order = pages if r == 0 else list(rng.permutation(pages))
        for slot, gpa in enumerate(order):
            builder.map(VA_BASE + slot * PAGE_SIZE, int(gpa))
        roots.append(builder.root)
    return FuzzWorld(monitor, tuple(pages), tuple(roots))


def generate_events(config: FuzzConfig, world: FuzzWorld) -> List[FuzzEvent]:
    """Draw the event stream (independent of how the monitor reacts)."""
    rng = np.random.RandomState(derive_seed(config.seed, "events"))
    mix = np.asarray(config.mix, dtype=float)
    if mix.shape != (len(EVENT_KINDS),) or (mix < 0).any() or mix.sum() <= 0:
        raise ValueError(f"mix must be {len(EVENT_KINDS)} non-negative weights, got {config.mix}")
    kinds = rng.choice(len(EVENT_KINDS), size=config.n_events, p=mix / mix.sum())
    layout = world.monitor.layout
    events = []
    for k in kinds:
        kind = EVENT_KINDS[k]
        if kind == EXECUTE:
            page = int(world.code_pages[rng.randint(len(world.code_pages))])
            events.append(FuzzEvent(kind, page, 0 if rng.rand() < 0.5 else -1))
        elif kind == WRITE:
            page = int(world.code_pages[rng.randint(len(world.code_pages))])
            n = 1 + int(rng.randint(4))
            offset = int(rng.randint(PAGE_SIZE - n + 1))
            if rng.rand() < 0.3:
                data = bytes([0x0F, 0x20, 0x18 | rng.randint(8), 0x90])[:n]
            else:
                data = bytes(rng.randint(0, 256, size=n).astype(np.uint8))
            events.append(FuzzEvent(kind, page, offset, data=data))
        elif kind == PT_WRITE:
            root = int(rng.randint(len(world.roots)))
            slot = int(rng.randint(len(world.code_pages) + 1))
            roll = rng.rand()
            if roll < config.pgpa_rate:
                value = make_entry(layout.pgpa_base_page + int(rng.randint(layout.device_pages)))
            elif roll < config.pgpa_rate + 0.1:
                value = 0
            else:
                target = int(world.code_pages[rng.randint(len(world.code_pages))])
                flags = PTE_PRESENT | (PTE_EXEC if rng.rand() < 0.8 else 0)
                value = make_entry(target, flags)
            events.append(FuzzEvent(kind, root, slot, value))
        else:
            events.append(FuzzEvent(kind, int(rng.randint(len(world.roots)))))
    return events


def apply_event(world: FuzzWorld, event: FuzzEvent) -> Optional[Any]:
    """Feed one event to the monitor; returns the monitor's answer."""
    monitor = world.monitor
    if event.kind == EXECUTE:
        if monitor.entry(event.target).executable:
            return None
        return monitor.request_execute(event.target, None if event.offset < 0 else event.offset)
    if event.kind == WRITE:
        return monitor.guest_write(event.target, event.offset, event.data)
    root = world.roots[event.target]
    if event.kind == CR3_LOAD:
        return monitor.handle_cr3_load(root, source="fuzz")[0]
    if event.kind == PT_WRITE:
        d, t, _ = split_va(VA_BASE + event.offset * PAGE_SIZE)
        table = GuestPageTable(monitor.memory, root).leaf_table(d)
        if table is None:
            return None
        return monitor.guest_write(table, t * 4, event.value.to_bytes(4, "little"))
    raise ValueError(f"Unknown fuzz event kind {event.kind!r}")


def audit(monitor: EptMonitor) -> pd.DataFrame:
    """Check every monitor invariant; one row per check.

    Checks: no page both writable and executable; no live predicate match in
    an executable page or adjacent executable pair (brute-force rescan);
    every page of every protected table write-protected; no protected table
    mapping a privileged page; int3 bookkeeping consistent with the records.
    """
    pgpa_leaves = []
    for root in monitor.protected_roots():
        walk = GuestPageTable(monitor.memory, root).walk()
        pgpa_leaves.extend(
            (root, m.va_page) for m in walk.leaves if m.gpa_page >= monitor.layout.pgpa_base_page
        )
    results = [
        ("w^x", monitor.audit_wx()),
        ("subtraction", monitor.audit_subtraction()),
        ("table-shielding", monitor.audit_table_shielding()),
        ("pgpa-mappings", pgpa_leaves),
        ("patch-bookkeeping", monitor.audit_patches()),
    ]
    d: Dict[str, pd.Series] = OrderedDict()
    d["check"] = pd.Series([name for name, _ in results], dtype="object")
    d["violations"] = pd.Series([len(found) for _, found in results], dtype="int64")
    d["detail"] = pd.Series([repr(found[:3]) if found else "" for _, found in results], dtype="object")
    return pd.DataFrame(d)


def run_events(config: FuzzConfig, events: List[FuzzEvent], progress_bar: bool = False) -> FuzzResult:
    """Build a fresh world and apply ``events`` in order."""
    world = build_world(config)
    monitor = world.monitor
    for root in world.roots:
        monitor.handle_cr3_load(root, source="boot")
    logger = Logger(config.log_freq) if config.log_freq > 0 else None
    for event in tqdm(events, disable=not progress_bar):
        apply_event(world, event)
        if logger is not None and logger.check():
            stats = monitor.stats()
            logger.log(
                {
                    "fuzz/exits": len(monitor.log),
                    "fuzz/records": stats["records"],
                    "fuzz/deferred": stats["deferred"],
                    "fuzz/executable": stats["executable_pages"],
                }
            )
    result = FuzzResult(events, monitor.log, audit(monitor))
    if result.breaches:
        logging.warning(f"Fuzz seed {config.seed}: {result.breaches} invariant violations")
    return result


def run_fuzz(config: FuzzConfig, progress_bar: bool = False) -> FuzzResult:
    """Generate and run a random event sequence, then audit the monitor."""
    world = build_world(config)
    events = generate_events(config, world)
    logging.info(f"Fuzzing {len(events)} events, seed {config.seed}")
    return run_events(config, events, progress_bar=progress_bar)


def replay_matches(config: FuzzConfig, events: List[FuzzEvent], expected: List[ExitEvent]) -> bool:
    """Whether replaying ``events`` reproduces exactly the ``expected`` exits."""
    return list(run_events(config, events).log) == list(expected)
