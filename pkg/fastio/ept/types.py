from enum import Enum, IntFlag
from typing import Any, Dict, NamedTuple, Optional, Tuple


class Perm(IntFlag):
    NONE = 0
    READ = 1
    WRITE = 2
    EXECUTE = 4

    def describe(self) -> str:
        """Compact ``rwx`` rendering, e.g. ``r-x``."""
        return "".join(
            c if self & p else "-"
            for c, p in (("r", Perm.READ), ("w", Perm.WRITE), ("x", Perm.EXECUTE))
        )


RW = Perm.READ | Perm.WRITE
RX = Perm.READ | Perm.EXECUTE


class PageKind(Enum):
    NORMAL = "Normal"
    GUEST_PAGE_TABLE = "GuestPageTable"
    DRIVER_CODE = "DriverCode"
    DRIVER_READ_ONLY = "DriverReadOnly"
    PGPA_DEVICE = "PgpaDevice"
    PGPA_SLAB = "PgpaSlab"


DRIVER_KINDS = frozenset([PageKind.DRIVER_CODE, PageKind.DRIVER_READ_ONLY])
PGPA_KINDS = frozenset([PageKind.PGPA_DEVICE, PageKind.PGPA_SLAB])


class EptEntry(NamedTuple):
    """Permission record of one guest-physical page.

    Parameters
    ----------
    gpa_page
        Guest-physical page number
    present
        Whether a host page backs the guest page
    perms
        Granted access rights
    backing
        Host-physical page number, or None if not present
    kind
        What the page holds
    """

    gpa_page: int
    present: bool
    perms: Perm
    backing: Optional[int]
    kind: PageKind = PageKind.NORMAL

    @property
    def executable(self) -> bool:
        return bool(self.perms & Perm.EXECUTE)

    @property
    def writable(self) -> bool:
        return bool(self.perms & Perm.WRITE)


class ExitReason(Enum):
    EPT_EXEC_VIOLATION = "EptExecViolation"
    EPT_WRITE_VIOLATION = "EptWriteViolation"
    CR3_LOAD_EXIT = "Cr3LoadExit"
    INT3_PATCH = "Int3Patch"
    INTERRUPT = "Interrupt"
    HYPERCALL = "Hypercall"
    NOT_PRESENT_FAULT = "NotPresentFault"


class Verdict(Enum):
    RESUMED = "Resumed"
    EMULATED = "Emulated"
    ATTACK_DETECTED = "AttackDetected"
    GUEST_FAULT = "GuestFault"


class ExitEvent(NamedTuple):
    """A VM exit and the hypervisor's verdict on it.

    Parameters
    ----------
    reason
        Why the guest exited
    verdict
        How the hypervisor handled the exit
    gpa_page
        Guest-physical page involved, if any
    context
        Sorted ``(name, value)`` pairs with registers, offsets and details
    """

    reason: ExitReason
    verdict: Verdict
    gpa_page: Optional[int] = None
    context: Tuple[Tuple[str, Any], ...] = ()

    @classmethod
    def make(
        cls, reason: ExitReason, verdict: Verdict, gpa_page: Optional[int] = None, **context: Any
    ) -> "ExitEvent":
        return cls(reason, verdict, gpa_page, tuple(sorted(context.items())))

    def get(self, key: str, default: Any = None) -> Any:
        """Look up a context value."""
        for k, v in self.context:
            if k == key:
                return v
        return default

    def to_dict(self) -> Dict[str, Any]:
        """JSON-compatible rendering."""
        return {
            "reason": self.reason.value,
            "verdict": self.verdict.value,
            "gpa_page": self.gpa_page,
            "context": dict(self.context),
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExitEvent":
        return cls.make(
            ExitReason(d["reason"]), Verdict(d["verdict"]), d.get("gpa_page"), **d.get("context", {})
        )


class Granted(NamedTuple):
    """Execute was granted on ``gpa_page`` after ``patched`` new patches."""

    gpa_page: int
    patched: int = 0


class Mapped(NamedTuple):
    """A slab page was backed on demand."""

    gpa_page: int
    backing: int


class Refused(NamedTuple):
    """A slab page could not be backed."""

    gpa_page: int
    reason: str


class TableVerdict(Enum):
    OK = "Ok"
    ATTACK_DETECTED = "AttackDetected"
    GUEST_FAULT = "GuestFault"


class TableCheck(NamedTuple):
    """Result of walking and protecting a guest page table.

    Parameters
    ----------
    verdict
        Ok, AttackDetected or GuestFault
    root
        Root table page
    table_pages
        Table pages found by the walk
    detail
        Human-readable reason for a non-Ok verdict
    """

    verdict: TableVerdict
    root: int
    table_pages: Tuple[int, ...] = ()
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.verdict is TableVerdict.OK
