"""The simulated guest: toy CPU, fastio driver, CR3 target controls and attack replay."""

from .attacks import (  # noqa: F401
    DRIVER_SCENARIOS,
    UNCACHED_ROOT,
    AttackOutcome,
    AttackProbe,
    AttackRun,
    AttackScenario,
    SearchConfig,
    cached_roots,
    classify,
    exhaustive_search,
    prepare_vm,
    probe,
    run_all,
    run_attack,
    runs_to_frame,
    search_space,
)
from .cpu import (  # noqa: F401
    ATTACK_POLICIES,
    EXIT_ON_ALL,
    INTERRUPT_DELIVERIES,
    POSTED_SHADOW_IDT,
    RESUME,
    RETURN_ADDRESS,
    TERMINATE,
    CallResult,
    GuestMachine,
    MachineConfig,
    Progress,
)
from .driver import (  # noqa: F401
    BODY_OFFSET,
    ENTRY_LOAD_OFFSET,
    EXIT_LOAD_OFFSET,
    HYPERCALL_OFFSET,
    RET_OFFSET,
    DriverImage,
    assemble_driver,
)
from .isa import Bus, GuestException, decode_length, emulate_patched, execute, is_cr3_load  # noqa: F401
from .state import FLAG_IF, FLAG_ZF, Cr3Targets, MachineState, Mode, Switched  # noqa: F401
from .vm import USER_STACK_VA, GuestProcess, GuestVm, device_probe  # noqa: F401
from .workload import (  # noqa: F401
    BUILTIN_WORKLOADS,
    CLEAN,
    CODE_KINDS,
    PLANTED,
    STRADDLE,
    USER_CODE_VA,
    builtin_workload,
    cpu_bound,
    forkwait,
    user_code,
)
