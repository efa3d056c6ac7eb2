"""Replay of branch-into-the-driver attacks and the exhaustive small-state search."""
import itertools
import logging
from collections import OrderedDict
from enum import Enum
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import pandas as pd
from tqdm import tqdm

from fastio.ept import ExitEvent, ExitReason, Verdict
from fastio.types import Config
from fastio.utils import Logger

from .cpu import INTERRUPT_DELIVERIES, GuestMachine
from .driver import ENTRY_LOAD_OFFSET, EXIT_LOAD_OFFSET, RET_OFFSET
from .state import EAX, EBX, FLAG_IF, FLAGS_FIXED
from .vm import GuestVm
from .workload import CLEAN

# root the attacker loads: a page of zeros, so a valid (empty) table
UNCACHED_ROOT = 0x00DEAD000
# where the attacker's own frame sends the driver's final ret
ATTACK_RETURN = 0xFFFFE000

ARRIVALS = (None, 0, 1, 2, 4, 8)


class AttackScenario(Enum):
    ENTRY_ARBITRARY_EAX = "EntryArbitraryEax"
    ENTRY_PPT_WITH_INTERRUPT = "EntryPptWithInterrupt"
    EXIT_PPT_JUMP = "ExitPptJump"
    NON_DRIVER_PPT_LOAD = "NonDriverPptLoad"


# the three branch-into-the-driver attacks; NON_DRIVER_PPT_LOAD runs on request
DRIVER_SCENARIOS = (
    AttackScenario.ENTRY_ARBITRARY_EAX,
    AttackScenario.ENTRY_PPT_WITH_INTERRUPT,
    AttackScenario.EXIT_PPT_JUMP,
)


class AttackOutcome(Enum):
    THWARTED_BY_EXIT = "ThwartedByExit"
    THWARTED_BY_HYPERCALL = "ThwartedByHypercall"
    GUEST_TERMINATED = "GuestTerminated"
    CONTAINED = "Contained"
    UNDETECTED = "Undetected"

    @property
    def detected(self) -> bool:
        return self is not AttackOutcome.UNDETECTED


class AttackProbe(NamedTuple):
    """One attacker-chosen starting state.

    Parameters
    ----------
    offset
        Driver offset branched to
    eax
        Attacker eax
    ebx
        Attacker ebx (the root the exit load restores)
    interrupt_flag
        Whether interrupts are enabled at the branch
    arrival
        Steps until an external interrupt arrives (None for no interrupt)
    delivery
        Interrupt delivery mode (the configured one if None)
    """

    offset: int
    eax: int
    ebx: int
    interrupt_flag: bool = False
    arrival: Optional[int] = None
    delivery: Optional[str] = None


class AttackRun(NamedTuple):
    scenario: str
    outcome: AttackOutcome
    events: List[ExitEvent]
    steps: int
    final_eip: int
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario,
            "outcome": self.outcome.value,
            "exits": len(self.events),
            "steps": self.steps,
            "final_eip": self.final_eip,
            "detail": self.detail,
        }


class SearchConfig(Config):
    """Settings for the exhaustive search.

    Parameters
    ----------
    max_steps
        Step budget of each probe
    arrivals
        Interrupt arrival times tried (None for no interrupt)
    deliveries
        Interrupt delivery modes tried
    log_freq
        Probes between progress log lines (0 disables)
    """

    max_steps: int = 200
    arrivals: Tuple[Optional[int], ...] = ARRIVALS
    deliveries: Tuple[str, ...] = INTERRUPT_DELIVERIES
    log_freq: int = 0


def classify(machine: GuestMachine, events: Sequence[ExitEvent]) -> AttackOutcome:
    """Outcome of one attack run from the machine's end state and the exits it took.

    A run is Undetected if privileged execution left the driver, or if the run
    ended still privileged without any detection.
    """
    detected = [e for e in events if e.verdict is Verdict.ATTACK_DETECTED]
    if machine.violations:
        return AttackOutcome.UNDETECTED
    if any(e.reason is ExitReason.HYPERCALL for e in detected):
        return AttackOutcome.THWARTED_BY_HYPERCALL
    if machine.terminated:
        return AttackOutcome.GUEST_TERMINATED
    if machine.state.privileged and not detected:
        return AttackOutcome.UNDETECTED
    if detected or any(e.reason is ExitReason.CR3_LOAD_EXIT for e in events):
        return AttackOutcome.THWARTED_BY_EXIT
    if any(e.reason is ExitReason.INT3_PATCH and e.get("op") == "cr3-load" for e in events):
        return AttackOutcome.THWARTED_BY_EXIT
    return AttackOutcome.CONTAINED


def prepare_vm(**kwargs: Any) -> GuestVm:
    """A guest with two processes, a registered driver and a warm CR3 cache.

    The kernel ends in ``victim``'s address space, with ``other``'s root also
    cached.
    """
    vm = GuestVm(**kwargs)
    vm.create_process("victim", 1, CLEAN)
    vm.create_process("other", 1, CLEAN)
    vm.boot("victim")
    result = vm.load_driver()
    if not result.trusted:
        raise RuntimeError(f"Driver attestation failed: {result.reason}")
    vm.fastio(1)
    vm.switch_to("other")
    vm.fastio(1)
    vm.switch_to("victim")
    vm.fastio(1)
    return vm


def cached_roots(vm: GuestVm) -> List[int]:
    """Guest roots currently held in the CR3 target controls (PPT excluded)."""
    ppt = vm.ppt_cr3
    return [v for v in vm.machine.state.cr3_targets.recent() if v != ppt]


def probe(vm: GuestVm, p: AttackProbe, max_steps: int = 200) -> AttackRun:
    """Branch into the driver from guest kernel mode with an attacker-chosen state.

    The machine is restored to its prior state afterwards; monitor-side
    effects (validated tables, the exit log) persist.
    """
    machine = vm.machine
    if vm.driver is None:
        raise ValueError("No fastio driver is registered")
    if not 0 <= p.offset <= RET_OFFSET:
        raise ValueError(f"Offset {p.offset} is outside the driver")
    base = machine.snapshot()
    config = machine.config
    if p.delivery is not None:
        machine.config = config._replace(interrupt_delivery=p.delivery)
    mark = len(vm.log)
    try:
        state = machine.state
        state.user = False
        state.interrupt_flag = p.interrupt_flag
        machine.store((state.esp - 4) & 0xFFFFFFFF, ATTACK_RETURN)
        flags = FLAGS_FIXED | (FLAG_IF if p.interrupt_flag else 0)
        machine.store((state.esp - 8) & 0xFFFFFFFF, flags)
        state.esp = state.esp - 8
        state.regs[EAX] = p.eax
        state.regs[EBX] = p.ebx
        state.eip = vm.driver_va + p.offset
        if p.arrival is not None:
            machine.schedule_interrupt(p.arrival)
        steps = machine.run(max_steps=max_steps, stop_outside_driver=True)
        events = vm.log.since(mark)
        outcome = classify(machine, events)
        detail = "; ".join(machine.violations) or (machine.fault.detail if machine.fault is not None else "")
        run = AttackRun("", outcome, events, steps, machine.state.eip, detail)
    finally:
        machine.config = config
        machine.restore(base)
    return run


def _scenario_probe(vm: GuestVm, scenario: AttackScenario) -> AttackProbe:
    caller = vm.machine.state.cr3
    if scenario is AttackScenario.ENTRY_ARBITRARY_EAX:
        return AttackProbe(ENTRY_LOAD_OFFSET, UNCACHED_ROOT, caller)
    if scenario is AttackScenario.ENTRY_PPT_WITH_INTERRUPT:
        return AttackProbe(ENTRY_LOAD_OFFSET, vm.ppt_cr3, caller, interrupt_flag=True, arrival=1)  # type: ignore
    if scenario is AttackScenario.EXIT_PPT_JUMP:
        return AttackProbe(EXIT_LOAD_OFFSET, vm.ppt_cr3, caller)  # type: ignore
    raise ValueError(f"{scenario} is not a branch into the driver")


def _non_driver_load(vm: GuestVm, max_steps: int) -> AttackRun:
    """Kernel code outside the driver loads the PPT root through its own (patched) cr3 load."""
    machine = vm.machine
    base = machine.snapshot()
    mark = len(vm.log)
    try:
        machine.state.user = False
        machine.state.eip = vm.attack_code()
        steps = machine.run(max_steps=max_steps)
        events = vm.log.since(mark)
        run = AttackRun("", classify(machine, events), events, steps, machine.state.eip)
    finally:
        machine.restore(base)
    return run


def run_attack(vm: GuestVm, scenario: AttackScenario, max_steps: int = 200) -> AttackRun:
    """Replay one attack scenario against ``vm``.

    Examples
    --------
    >>> vm = prepare_vm()
    >>> run_attack(vm, AttackScenario.EXIT_PPT_JUMP).outcome.value
    'ThwartedByHypercall'
    """
    if scenario is AttackScenario.NON_DRIVER_PPT_LOAD:
        run = _non_driver_load(vm, max_steps)
    else:
        run = probe(vm, _scenario_probe(vm, scenario), max_steps)
    run = run._replace(scenario=scenario.value)
    log = logging.error if run.outcome is AttackOutcome.UNDETECTED else logging.info
    log(f"Attack {scenario.value}: {run.outcome.value} after {run.steps} steps, {len(run.events)} exits")
    return run


def runs_to_frame(runs: Iterable[AttackRun]) -> pd.DataFrame:
    """One row per attack run."""
    records = [r.to_dict() for r in runs]
    d: Dict[str, pd.Series] = OrderedDict()
    for col in ["scenario", "outcome", "exits", "steps", "final_eip", "detail"]:
        dtype = "int64" if col in ("exits", "steps", "final_eip") else "object"
        d[col] = pd.Series([r[col] for r in records], dtype=dtype)
    return pd.DataFrame(d)


def run_all(
    vm: GuestVm, scenarios: Sequence[AttackScenario] = DRIVER_SCENARIOS, max_steps: int = 200
) -> pd.DataFrame:
    """Run each scenario against ``vm`` and tabulate the outcomes."""
    return runs_to_frame(run_attack(vm, s, max_steps) for s in scenarios)


def search_space(vm: GuestVm, config: SearchConfig = SearchConfig()) -> List[AttackProbe]:
    """Every starting state of the exhaustive search.

    Jump targets are all driver offsets (instruction starts or not); eax and
    ebx range over the PPT root, the cached roots and one uncached root.
    """
    caller = vm.machine.state.cr3
    eaxes = [vm.ppt_cr3] + cached_roots(vm) + [UNCACHED_ROOT]
    ebxes = [caller, vm.ppt_cr3, UNCACHED_ROOT]
    grid = itertools.product(
        range(RET_OFFSET + 1), eaxes, ebxes, (False, True), config.deliveries, config.arrivals
    )
    return [AttackProbe(o, a, b, f, t, d) for o, a, b, f, d, t in grid]  # type: ignore


def exhaustive_search(
    vm: GuestVm, config: SearchConfig = SearchConfig(), progress_bar: bool = False
) -> pd.DataFrame:
    """Run every probe of :func:`search_space`; one row per probe.

    Returns
    -------
    pd.DataFrame
        Columns ``offset``, ``eax``, ``ebx``, ``interrupt_flag``, ``arrival``
        (-1 for none), ``delivery``, ``outcome``, ``exits``
    """
    probes = search_space(vm, config)
    logging.info(f"Exhaustive attack search over {len(probes)} starting states")
    logger = Logger(config.log_freq, unit="probes") if config.log_freq > 0 else None
    rows: List[Tuple[AttackProbe, AttackRun]] = []
    undetected = 0
    for p in tqdm(probes, disable=not progress_bar):
        run = probe(vm, p, config.max_steps)
        rows.append((p, run))
        if run.outcome is AttackOutcome.UNDETECTED:
            undetected += 1
            logging.error(f"Undetected attack from {p}: {run.detail}")
        if logger is not None and logger.check():
            logger.log({"attack/probes": len(rows), "attack/undetected": undetected})
    d: Dict[str, pd.Series] = OrderedDict()
    d["offset"] = pd.Series([p.offset for p, _ in rows], dtype="int64")
    d["eax"] = pd.Series([p.eax for p, _ in rows], dtype="int64")
    d["ebx"] = pd.Series([p.ebx for p, _ in rows], dtype="int64")
    d["interrupt_flag"] = pd.Series([p.interrupt_flag for p, _ in rows], dtype="bool")
    d["arrival"] = pd.Series([-1 if p.arrival is None else p.arrival for p, _ in rows], dtype="int64")
    d["delivery"] = pd.Series([p.delivery for p, _ in rows], dtype="object")
    d["outcome"] = pd.Series([r.outcome.value for _, r in rows], dtype="object")
    d["exits"] = pd.Series([len(r.events) for _, r in rows], dtype="int64")
    return pd.DataFrame(d)
