from collections import Counter, OrderedDict
from typing import Any, Dict, Iterable, Iterator, List, Optional

import pandas as pd

from .types import ExitEvent, ExitReason, PageKind

CATEGORIES = (
    "exec-exits",
    "ptable-exits",
    "write-exits",
    "cr3-exits",
    "int3-exits",
    "interrupt-exits",
    "hypercalls",
    "pgpa-faults",
    "faults",
)


def categorize(event: ExitEvent) -> str:
    """Overhead category of an exit.

    Writes to guest page-table pages are ``ptable-exits``; cr3-load exits and
    int3 traps whose original instruction is a cr3 load are ``cr3-exits``.
    Exceptions the CPU raised (rather than slab faults) are ``faults``.
    """
    reason = event.reason
    if reason is ExitReason.EPT_EXEC_VIOLATION:
        return "exec-exits"
    if reason is ExitReason.EPT_WRITE_VIOLATION:
        if event.get("kind") == PageKind.GUEST_PAGE_TABLE.value:
            return "ptable-exits"
        return "write-exits"
    if reason is ExitReason.CR3_LOAD_EXIT:
        return "cr3-exits"
    if reason is ExitReason.INT3_PATCH:
        return "cr3-exits" if event.get("op") == "cr3-load" else "int3-exits"
    if reason is ExitReason.INTERRUPT:
        return "interrupt-exits"
    if reason is ExitReason.HYPERCALL:
        return "hypercalls"
    if event.get("source") == "interrupt":
        return "interrupt-exits"
    if event.get("source") in ("guest", "privileged"):
        return "faults"
    return "pgpa-faults"


class ExitCounter:
    """Exit counts by reason and by category.

    Examples
    --------
    >>> from fastio.ept.types import Verdict
    >>> counter = ExitCounter()
    >>> counter.add(ExitEvent.make(ExitReason.CR3_LOAD_EXIT, Verdict.RESUMED))
    >>> counter.category("cr3-exits")
    1
    """

    def __init__(self, events: Optional[Iterable[ExitEvent]] = None) -> None:
        self.by_reason: Counter = Counter()
        self.by_category: Counter = Counter()
        self.by_verdict: Counter = Counter()
        for event in events or ():
            self.add(event)

    def add(self, event: ExitEvent) -> None:
        self.by_reason[event.reason.value] += 1
        self.by_category[categorize(event)] += 1
        self.by_verdict[event.verdict.value] += 1

    def category(self, name: str) -> int:
        return int(self.by_category[name])

    @property
    def total(self) -> int:
        return int(sum(self.by_reason.values()))

    def to_frame(self, per_op: Optional[int] = None) -> pd.DataFrame:
        """Counts per category (every category listed, zeros included).

        Parameters
        ----------
        per_op
            If given, adds a ``per_op`` column dividing counts by this many operations
        """
        d: Dict[str, pd.Series] = OrderedDict()
        d["category"] = pd.Series(list(CATEGORIES), dtype="object")
        d["count"] = pd.Series([self.by_category[c] for c in CATEGORIES], dtype="int64")
        if per_op:
            d["per_op"] = d["count"] / float(per_op)
        return pd.DataFrame(d)


class ExitLog:
    """Append-only log of every exit the hypervisor handled."""

    def __init__(self) -> None:
        self._events: List[ExitEvent] = []

    def append(self, event: ExitEvent) -> ExitEvent:
        self._events.append(event)
        return event

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[ExitEvent]:
        return iter(self._events)

    def __getitem__(self, i: int) -> ExitEvent:
        return self._events[i]

    def since(self, mark: int) -> List[ExitEvent]:
        """Events logged after ``len(log)`` was ``mark``."""
        return self._events[mark:]

    def counter(self, mark: int = 0) -> ExitCounter:
        return ExitCounter(self._events[mark:])

    def to_records(self) -> List[Dict[str, Any]]:
        return [e.to_dict() for e in self._events]

    @classmethod
    def from_records(cls, records: Iterable[Dict[str, Any]]) -> "ExitLog":
        log = cls()
        for record in records:
            log.append(ExitEvent.from_dict(record))
        return log
