from collections import OrderedDict
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Optional

MASK32 = 0xFFFFFFFF

REGISTER_NAMES = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
EAX, ECX, EDX, EBX, ESP, EBP, ESI, EDI = range(8)

FLAG_ZF = 0x40
FLAG_IF = 0x200
# bit 1 of eflags always reads as 1
FLAGS_FIXED = 0x2

N_CR3_TARGETS = 4


class Mode(Enum):
    GUEST_KERNEL = "GuestKernel"
    GUEST_USER = "GuestUser"
    PRIVILEGED_PPT = "PrivilegedPpt"


class Switched(NamedTuple):
    """A cr3 load that changed the address space without leaving the guest."""

    cr3: int


class Cr3Targets:
    """CR3 target controls: one pinned slot plus least-recently-used slots.

    Loads of any value held here do not exit. Slot 0 is pinned to the PPT
    root once the driver is registered; the remaining slots cache recently
    validated guest roots.

    Parameters
    ----------
    n_slots
        Total number of target slots, the pinned one included

    Examples
    --------
    >>> targets = Cr3Targets()
    >>> targets.pin(0x5000)
    >>> [targets.remember(v) for v in (0x1000, 0x2000, 0x3000, 0x4000)]
    [None, None, None, 4096]
    >>> targets.slots()
    [20480, 8192, 12288, 16384]
    """

    def __init__(self, n_slots: int = N_CR3_TARGETS) -> None:
        if n_slots < 1:
            raise ValueError(f"n_slots must be at least 1, got {n_slots}")
        self.n_slots = n_slots
        self.pinned: Optional[int] = None
        self._recent: "OrderedDict[int, None]" = OrderedDict()

    @property
    def capacity(self) -> int:
        """Slots available to guest roots."""
        return self.n_slots - 1

    def pin(self, value: int) -> None:
        """Pin ``value`` (the PPT root) in slot 0."""
        self._recent.pop(value, None)
        self.pinned = value

    def __contains__(self, value: object) -> bool:
        return value == self.pinned or value in self._recent

    def lookup(self, value: int) -> bool:
        """Whether a load of ``value`` avoids an exit; refreshes its recency."""
        if value == self.pinned:
            return True
        if value in self._recent:
            self._recent.move_to_end(value)
            return True
        return False

    def remember(self, value: int) -> Optional[int]:
        """Cache a validated root, returning the root it evicted (if any)."""
        if value == self.pinned or self.capacity == 0:
            return None
        self._recent[value] = None
        self._recent.move_to_end(value)
        if len(self._recent) > self.capacity:
            evicted, _ = self._recent.popitem(last=False)
            return evicted
        return None

    def forget(self, value: int) -> None:
        self._recent.pop(value, None)

    def recent(self) -> List[int]:
        """Cached guest roots, least recently used first."""
        return list(self._recent)

    def slots(self) -> List[Optional[int]]:
        """All slots in order, pinned first, None for empty slots."""
        values: List[Optional[int]] = [self.pinned, *self._recent]
        return values + [None] * (self.n_slots - len(values))

    def copy(self) -> "Cr3Targets":
        other = Cr3Targets(self.n_slots)
        other.pinned = self.pinned
        other._recent = OrderedDict(self._recent)
        return other


class MachineState:
    """Architectural state of one simulated vCPU.

    The mode is derived rather than stored: the CPU runs in PrivilegedPpt mode
    exactly when cr3 holds the pinned PPT root.

    Parameters
    ----------
    eip
        Instruction pointer (virtual address)
    cr3
        Value of the cr3 register (root page number << 12)
    flags
        eflags value
    cr3_targets
        CR3 target controls (a fresh 4-slot set if None)
    user
        Whether guest code runs in user mode
    """

    def __init__(
        self,
        eip: int = 0,
        cr3: int = 0,
        flags: int = FLAGS_FIXED,
        cr3_targets: Optional[Cr3Targets] = None,
        user: bool = False,
    ) -> None:
        self.regs = [0] * len(REGISTER_NAMES)
        self.eip = eip
        self.cr3 = cr3
        self.flags = flags | FLAGS_FIXED
        self.cr3_targets = cr3_targets if cr3_targets is not None else Cr3Targets()
        self.user = user
        self.halted = False

    def _get(self, index: int) -> int:
        return self.regs[index]

    def _put(self, index: int, value: int) -> None:
        self.regs[index] = value & MASK32

    @property
    def eax(self) -> int:
        return self.regs[EAX]

    @eax.setter
    def eax(self, value: int) -> None:
        self._put(EAX, value)

    @property
    def esp(self) -> int:
        return self.regs[ESP]

    @esp.setter
    def esp(self, value: int) -> None:
        self._put(ESP, value)

    @property
    def stack_register(self) -> int:
        return self.esp

    @property
    def interrupt_flag(self) -> bool:
        return bool(self.flags & FLAG_IF)

    @interrupt_flag.setter
    def interrupt_flag(self, value: bool) -> None:
        self.flags = (self.flags | FLAG_IF) if value else (self.flags & ~FLAG_IF)

    @property
    def zero_flag(self) -> bool:
        return bool(self.flags & FLAG_ZF)

    @zero_flag.setter
    def zero_flag(self, value: bool) -> None:
        self.flags = (self.flags | FLAG_ZF) if value else (self.flags & ~FLAG_ZF)

    @property
    def root(self) -> int:
        """Root page number selected by cr3."""
        return self.cr3 >> 12

    @property
    def privileged(self) -> bool:
        pinned = self.cr3_targets.pinned
        return pinned is not None and self.cr3 == pinned

    @property
    def mode(self) -> Mode:
        if self.privileged:
            return Mode.PRIVILEGED_PPT
        return Mode.GUEST_USER if self.user else Mode.GUEST_KERNEL

    def register(self, name: str) -> int:
        """Value of a register by name (``eax``, ``esp``, ...)."""
        try:
            return self.regs[REGISTER_NAMES.index(name)]
        except ValueError:
            raise ValueError(f"Unknown register {name!r}") from None

    def set_register(self, name: str, value: int) -> None:
        try:
            self._put(REGISTER_NAMES.index(name), value)
        except ValueError:
            raise ValueError(f"Unknown register {name!r}") from None

    def copy(self) -> "MachineState":
        other = MachineState(self.eip, self.cr3, self.flags, self.cr3_targets.copy(), self.user)
        other.regs = list(self.regs)
        other.halted = self.halted
        return other

    def to_dict(self) -> Dict[str, Any]:
        """JSON-compatible rendering for reports."""
        d: Dict[str, Any] = {name: value for name, value in zip(REGISTER_NAMES, self.regs)}
        d.update(
            eip=self.eip,
            cr3=self.cr3,
            flags=self.flags,
            interrupt_flag=self.interrupt_flag,
            mode=self.mode.value,
            cr3_targets=self.cr3_targets.slots(),
            halted=self.halted,
        )
        return d
