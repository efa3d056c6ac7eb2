"""EPT permission model, guest paging, exit handling and fuzzing."""

from .fuzz import (  # noqa: F401
    FuzzConfig,
    FuzzEvent,
    FuzzResult,
    audit,
    build_world,
    generate_events,
    replay_matches,
    run_events,
    run_fuzz,
)
from .memory import GuestMemory  # noqa: F401
from .monitor import EptConfig, EptMonitor  # noqa: F401
from .page_table import (  # noqa: F401
    ENTRIES,
    LEAF_DEFAULT,
    PTE_EXEC,
    PTE_PRESENT,
    PTE_USER,
    PTE_WRITE,
    TABLE_DEFAULT,
    GuestPageTable,
    Mapping,
    PageTableBuilder,
    PrivilegedPageTable,
    TableWalk,
    make_entry,
    split_va,
)
from .trace import CATEGORIES, ExitCounter, ExitLog, categorize  # noqa: F401
from .types import (  # noqa: F401
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
