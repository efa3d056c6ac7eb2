"""The simulated vCPU: fetch under EPT control, cr3 semantics, interrupts and fastio calls."""
import logging
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple, Union

from fastio.ept import (
    PTE_EXEC,
    PTE_WRITE,
    EptMonitor,
    ExitEvent,
    ExitLog,
    ExitReason,
    GuestPageTable,
    Mapped,
    PrivilegedPageTable,
    Refused,
    TableVerdict,
    Verdict,
)
from fastio.ept.types import PGPA_KINDS
from fastio.scan import PatchRecord, decode_instruction
from fastio.scan.decode import MAX_INSTRUCTION_LENGTH
from fastio.types import PAGE_SIZE, Config

from .isa import INT3, Bus, GuestException, decode_length, emulate_patched, execute, is_cr3_load, push
from .state import MASK32, MachineState, Switched

EXIT_ON_ALL = "exit_on_all"
POSTED_SHADOW_IDT = "posted_shadow_idt"
INTERRUPT_DELIVERIES = (EXIT_ON_ALL, POSTED_SHADOW_IDT)

TERMINATE = "terminate"
RESUME = "resume"
ATTACK_POLICIES = (TERMINATE, RESUME)

# return address pushed by fastio_call; never mapped
RETURN_ADDRESS = 0xFFFFF000


class MachineConfig(Config):
    """Settings for the simulated vCPU.

    Parameters
    ----------
    interrupt_delivery
        ``exit_on_all`` (every external interrupt exits) or
        ``posted_shadow_idt`` (posted delivery through a shadow IDT the PPT
        leaves unmapped)
    attack_policy
        ``terminate`` the guest on a detected attack, or ``resume`` it in its
        last validated address space
    step_limit
        Instructions a single run may execute before it is abandoned
    """

    interrupt_delivery: str = EXIT_ON_ALL
    attack_policy: str = TERMINATE
    step_limit: int = 10000


class Progress(NamedTuple):
    """A step that caused no exit."""

    eip: int


class CallResult(NamedTuple):
    """Outcome of a fastio call: the CPU state after it and the exits it took."""

    state: MachineState
    exits: int


StepResult = Union[Progress, ExitEvent]
Body = Callable[["GuestMachine"], None]


class _Stop(Exception):
    """The hypervisor terminated the guest in the middle of an instruction."""

    def __init__(self, event: ExitEvent) -> None:
        super().__init__(event.reason.value)
        self.event = event


class GuestMachine(Bus):
    """One guest vCPU running the toy ISA over EPT-governed memory.

    Every exit the CPU takes is appended to the monitor's exit log, so the log
    holds the complete hypervisor-side trace.

    Parameters
    ----------
    monitor
        The guest's EPT monitor
    ppt
        Privileged page table, or None before a driver is registered
    driver_window
        Virtual range ``[start, end)`` of the driver's instructions
    state
        Initial CPU state (a fresh one if None)
    body
        Work the driver body hook performs (None does nothing)
    kwargs
        Settings merged into :class:`MachineConfig`
    """

    def __init__(
        self,
        monitor: EptMonitor,
        ppt: Optional[PrivilegedPageTable] = None,
        driver_window: Tuple[int, int] = (0, 0),
        state: Optional[MachineState] = None,
        body: Optional[Body] = None,
        **kwargs: Any,
    ) -> None:
        self.config = MachineConfig(**kwargs)  # type: ignore
        if self.config.interrupt_delivery not in INTERRUPT_DELIVERIES:
            raise ValueError(
                f"interrupt_delivery must be one of {INTERRUPT_DELIVERIES}, "
                f"got {self.config.interrupt_delivery!r}"
            )
        if self.config.attack_policy not in ATTACK_POLICIES:
            raise ValueError(
                f"attack_policy must be one of {ATTACK_POLICIES}, got {self.config.attack_policy!r}"
            )
        if self.config.step_limit < 1:
            raise ValueError(f"step_limit must be positive, got {self.config.step_limit}")
        self.monitor = monitor
        self.state = state if state is not None else MachineState()
        self.body_fn = body
        self.ppt: Optional[PrivilegedPageTable] = None
        self.driver_window = driver_window
        if ppt is not None:
            self.attach_driver(ppt, driver_window)
        self.steps = 0
        self.calls = 0
        self.guest_breakpoints = 0
        self.interrupts_delivered = 0
        self._reset_run_state()

    def _reset_run_state(self) -> None:
        self.terminated = False
        self.fault: Optional[GuestException] = None
        self.violations: List[str] = []
        self._arrivals: List[int] = []
        self._held = 0
        self._posted = 0
        self._emulating = False
        self._trap: Dict[str, Any] = {}
        self._last_guest_cr3 = self.state.cr3

    def attach_driver(self, ppt: PrivilegedPageTable, driver_window: Tuple[int, int]) -> None:
        """Pin the PPT root in the CR3 target controls."""
        self.ppt = ppt
        self.driver_window = driver_window
        self.state.cr3_targets.pin(ppt.root << 12)

    @property
    def log(self) -> ExitLog:
        return self.monitor.log

    @property
    def ppt_cr3(self) -> Optional[int]:
        return self.state.cr3_targets.pinned

    @property
    def stopped(self) -> bool:
        return self.terminated or self.fault is not None or self.state.halted or bool(self.violations)

    def in_driver(self, va: int) -> bool:
        return self.driver_window[0] <= va < self.driver_window[1]

    def snapshot(self) -> MachineState:
        return self.state.copy()

    def restore(self, state: MachineState) -> None:
        """Reset the CPU to a snapshot, dropping pending interrupts and stop conditions."""
        self.state = state.copy()
        self._reset_run_state()

    # Hypervisor side

    def _exit(self, reason: ExitReason, verdict: Verdict, gpa_page: Optional[int] = None, **context: Any) -> ExitEvent:
        return self.log.append(ExitEvent.make(reason, verdict, gpa_page, **context))

    def _switch(self, value: int) -> None:
        self.state.cr3 = value
        if not self.state.privileged:
            self._last_guest_cr3 = value

    def _attack(self, event: ExitEvent) -> None:
        """Apply the attack policy after a logged AttackDetected exit."""
        logging.warning(
            f"Attack detected ({event.reason.value}) at eip {self.state.eip:#x}: {event.get('detail', '')}"
        )
        if self.config.attack_policy == TERMINATE:
            self.terminated = True
            raise _Stop(event)
        if self.state.privileged:
            self._switch(self._last_guest_cr3)

    # Memory

    def translate(self, va: int, access: str = "read") -> Tuple[int, int]:
        """Translate ``va`` through the active page table.

        Parameters
        ----------
        va
            Virtual address
        access
            ``read``, ``write`` or ``fetch``

        Returns
        -------
        Tuple[int, int]
            Guest-physical page and page offset

        Raises
        ------
        GuestException
            If the address is unmapped, the mapping forbids the access, or the
            page is not present and cannot be backed
        """
        va &= MASK32
        if self.state.privileged:
            found = self.ppt.translate(va)  # type: ignore
        else:
            found = GuestPageTable(self.monitor.memory, self.state.root).translate(va)
        if found is None:
            raise GuestException("#PF", f"{access} of unmapped va {va:#x}")
        gpa, flags = found
        if access == "write" and not flags & PTE_WRITE:
            raise GuestException("#PF", f"write to read-only va {va:#x}")
        if access == "fetch" and not flags & PTE_EXEC:
            raise GuestException("#PF", f"fetch from no-execute va {va:#x}")
        if not self.monitor.entry(gpa).present:
            self._back(gpa)
        return gpa, va & (PAGE_SIZE - 1)

    def _back(self, gpa_page: int) -> None:
        layout = self.monitor.layout
        if not layout.pgpa_start_page <= gpa_page < layout.pgpa_end_page:
            raise GuestException("#PF", f"page {gpa_page:#x} is not present")
        result = self.monitor.map_pgpa_on_demand(gpa_page, privileged=self.state.privileged)
        if isinstance(result, Mapped):
            return
        if isinstance(result, Refused):
            raise GuestException("#PF", result.reason, logged=True)
        self._attack(result)
        raise GuestException("#PF", f"slab page {gpa_page:#x} touched outside the PPT", logged=True)

    def read32(self, va: int) -> int:
        if va & 3:
            raise GuestException("#AC", f"unaligned read at {va:#x}")
        gpa, offset = self.translate(va, "read")
        return self.monitor.memory.read32(gpa, offset)

    def write32(self, va: int, value: int) -> None:
        if va & 3:
            raise GuestException("#AC", f"unaligned write at {va:#x}")
        gpa, offset = self.translate(va, "write")
        data = (value & MASK32).to_bytes(4, "little")
        entry = self.monitor.entry(gpa)
        if self.state.privileged and entry.kind in PGPA_KINDS and entry.writable:
            self.monitor.memory.write(gpa, offset, data)
            return
        event = self.monitor.guest_write(gpa, offset, data)
        if event is None or event.verdict in (Verdict.RESUMED, Verdict.EMULATED):
            return
        if event.verdict is Verdict.ATTACK_DETECTED:
            self._attack(event)
            return
        raise GuestException("#PF", f"write to {va:#x} refused", logged=True)

    # cr3

    def load_cr3(self, value: int) -> Union[Switched, ExitEvent, None]:
        """Load cr3, exiting unless the value is held in the CR3 target controls.

        Returns
        -------
        Union[Switched, ExitEvent, None]
            Switched for an exitless load, the Cr3LoadExit otherwise (None while
            emulating a trapped load refused as an attack)

        Raises
        ------
        GuestException
            If the loaded table is malformed
        """
        value &= MASK32
        if self._emulating:
            return self._emulated_load(value)
        if self.state.cr3_targets.lookup(value):
            self._switch(value)
            return Switched(value)
        event, check = self.monitor.handle_cr3_load(value >> 12, eip=self.state.eip, value=value)
        if check.ok:
            self.state.cr3_targets.remember(value)
            self._switch(value)
            return event
        if event.verdict is Verdict.ATTACK_DETECTED:
            self._attack(event)
            return event
        raise GuestException("#GP", check.detail, logged=True)

    def _emulated_load(self, value: int) -> Optional[Switched]:
        """A cr3 load the hypervisor emulates after a trap."""
        self._trap["op"] = "cr3-load"
        self._trap["value"] = value
        if value == self.ppt_cr3:
            self._trap["verdict"] = Verdict.ATTACK_DETECTED
            self._trap["detail"] = "PPT root loaded outside the driver's load sites"
            return None
        if not self.state.cr3_targets.lookup(value):
            check = self.monitor.protect_page_tables(value >> 12)
            if check.verdict is TableVerdict.ATTACK_DETECTED:
                self._trap["verdict"] = Verdict.ATTACK_DETECTED
                self._trap["detail"] = check.detail
                return None
            if not check.ok:
                raise GuestException("#GP", check.detail)
            self.state.cr3_targets.remember(value)
        self._switch(value)
        return Switched(value)

    def boot(self, cr3: int) -> None:
        """Start the guest in address space ``cr3`` (validated, not cached)."""
        check = self.monitor.protect_page_tables(cr3 >> 12)
        if not check.ok:
            raise ValueError(f"Cannot boot from root {cr3 >> 12:#x}: {check.detail}")
        self._switch(cr3)

    # Traps

    def hypercall(self) -> None:
        if self.state.privileged:
            event = self._exit(
                ExitReason.HYPERCALL,
                Verdict.ATTACK_DETECTED,
                eip=self.state.eip,
                op="ppt-alert",
                detail="cr3 still holds the PPT root after the exit load",
            )
            self._attack(event)
            return
        self._exit(ExitReason.HYPERCALL, Verdict.RESUMED, eip=self.state.eip, eax=self.state.eax)

    def body(self) -> None:
        if self.body_fn is None:
            return
        try:
            self.body_fn(self)
        except (GuestException, _Stop):
            raise
        except Exception as e:
            raise GuestException("#BODY", f"{type(e).__name__}: {e}")

    def breakpoint(self) -> None:
        """A guest int3 that the monitor did not place: the guest's own breakpoint."""
        self.guest_breakpoints += 1
        if self.state.privileged:
            raise GuestException("#BP", f"int3 at {self.state.eip:#x} in privileged mode")
        self._exit(ExitReason.INT3_PATCH, Verdict.RESUMED, eip=self.state.eip, guest=True)

    def _window_offset(self, record: PatchRecord, gpa_page: int, offset: int) -> int:
        if gpa_page != record.page_index:
            return offset + PAGE_SIZE
        if offset not in record.patch_offsets and offset + PAGE_SIZE in record.patch_offsets:
            return offset + PAGE_SIZE
        return offset

    def _trap_patch(self, record: PatchRecord, gpa_page: int, offset: int) -> None:
        """Emulate the original instruction behind a monitor-placed int3."""
        va = self.state.eip
        window = self.monitor.original_window(record.page_index, record.successor_page)
        window_offset = self._window_offset(record, gpa_page, offset)
        instr = None if record.emulation_spec is None else record.emulation_spec.at(window_offset)
        if instr is None and record.emulation_spec is not None:
            instr = decode_instruction(window, window_offset)
        context: Dict[str, Any] = {
            "eip": va,
            "offset": offset,
            "op": "cr3-load" if instr is not None and is_cr3_load(instr.code) else "other",
        }
        self._trap = {}
        self._emulating = True
        try:
            emulate_patched(record, self.state, self, window_offset, window)
        except GuestException as e:
            self._exit(ExitReason.INT3_PATCH, Verdict.GUEST_FAULT, gpa_page, detail=e.detail, **context)
            raise GuestException(e.vector, e.detail, logged=True)
        finally:
            self._emulating = False
        verdict = self._trap.get("verdict", Verdict.EMULATED)
        if "detail" in self._trap:
            context["detail"] = self._trap["detail"]
        event = self._exit(ExitReason.INT3_PATCH, verdict, gpa_page, **context)
        if verdict is Verdict.ATTACK_DETECTED:
            self._attack(event)

    def _emulate_blocked(self, gpa_page: int, offset: int) -> None:
        """Emulate one instruction on a page a deferred hit keeps non-executable."""
        va = self.state.eip
        window = self.monitor.original_page(gpa_page)
        instr = decode_instruction(window, offset)
        if instr is None:
            raise GuestException("#UD", f"cannot emulate the instruction at {va:#x}")
        self._trap = {}
        self._emulating = True
        try:
            execute(self.state, instr.code, self)
        finally:
            self._emulating = False
        if self._trap.get("verdict") is Verdict.ATTACK_DETECTED:
            event = self._exit(
                ExitReason.EPT_EXEC_VIOLATION,
                Verdict.ATTACK_DETECTED,
                gpa_page,
                eip=va,
                op="cr3-load",
                detail=self._trap["detail"],
            )
            self._attack(event)

    # Interrupts

    def schedule_interrupt(self, after_steps: int = 0) -> None:
        """Make an external interrupt arrive ``after_steps`` steps from now."""
        if after_steps < 0:
            raise ValueError(f"after_steps must be non-negative, got {after_steps}")
        self._arrivals.append(self.steps + after_steps)

    def inject_interrupt(self, delivery: Optional[str] = None) -> Optional[ExitEvent]:
        """Deliver one external interrupt now.

        Parameters
        ----------
        delivery
            Delivery mode (the configured one if None)

        Returns
        -------
        Optional[ExitEvent]
            The exit the interrupt caused, or None for exitless posted delivery
        """
        try:
            return self._inject(delivery)
        except _Stop as stop:
            return stop.event

    def _inject(self, delivery: Optional[str]) -> Optional[ExitEvent]:
        delivery = delivery or self.config.interrupt_delivery
        state = self.state
        if delivery == EXIT_ON_ALL:
            # The exit is taken either way; the PPT check applies when the
            # guest takes the interrupt, which with IF clear is deferred to
            # _tick_interrupts.
            if state.privileged and state.interrupt_flag:
                event = self._exit(
                    ExitReason.INTERRUPT,
                    Verdict.ATTACK_DETECTED,
                    eip=state.eip,
                    mode=state.mode.value,
                    detail="interrupt arrived while the PPT was live",
                )
                self._attack(event)
                self.interrupts_delivered += 1
                return event
            event = self._exit(
                ExitReason.INTERRUPT,
                Verdict.RESUMED,
                eip=state.eip,
                mode=state.mode.value,
                interrupt_flag=state.interrupt_flag,
            )
            if state.interrupt_flag:
                self.interrupts_delivered += 1
            else:
                self._held += 1
            return event
        if delivery == POSTED_SHADOW_IDT:
            if not state.interrupt_flag:
                self._posted += 1
                return None
            return self._deliver_posted()
        raise ValueError(f"Unknown interrupt delivery {delivery!r}")

    def _deliver_posted(self) -> Optional[ExitEvent]:
        if self.state.privileged:
            event = self._exit(
                ExitReason.NOT_PRESENT_FAULT,
                Verdict.ATTACK_DETECTED,
                eip=self.state.eip,
                source="interrupt",
                detail="interrupt vectored through the shadow IDT, not present in the PPT",
            )
            self._attack(event)
            self.interrupts_delivered += 1
            return event
        self.interrupts_delivered += 1
        return None

    def _tick_interrupts(self) -> None:
        due = [a for a in self._arrivals if a <= self.steps]
        if due:
            self._arrivals = [a for a in self._arrivals if a > self.steps]
            for _ in due:
                self._inject(None)
        if not self.state.interrupt_flag:
            return
        while self._held:
            self._held -= 1
            if self.state.privileged:
                event = self._exit(
                    ExitReason.INTERRUPT,
                    Verdict.ATTACK_DETECTED,
                    eip=self.state.eip,
                    mode=self.state.mode.value,
                    detail="held interrupt injected while the PPT was live",
                )
                self._attack(event)
            self.interrupts_delivered += 1
        while self._posted:
            self._posted -= 1
            self._deliver_posted()

    # Execution

    def _code_at(self, va: int, gpa_page: int, offset: int) -> bytes:
        page = self.monitor.memory.page(gpa_page)
        code = bytes(page[offset : offset + MAX_INSTRUCTION_LENGTH])
        if decode_length(code) is None and offset + len(code) == PAGE_SIZE:
            next_gpa, _ = self.translate(va - offset + PAGE_SIZE, "fetch")
            if not self.monitor.entry(next_gpa).executable:
                result = self.monitor.request_execute(next_gpa)
                if isinstance(result, ExitEvent):
                    raise GuestException("#PF", f"page {next_gpa:#x} may not execute", logged=True)
            # granting the successor may have patched this page too
            code = bytes(page[offset:]) + bytes(self.monitor.memory.page(next_gpa)[:MAX_INSTRUCTION_LENGTH])
        return code

    def _step(self) -> None:
        va = self.state.eip
        if self.state.privileged and not self.in_driver(va):
            detail = f"privileged execution at {va:#x} outside the driver"
            logging.error(detail)
            self.violations.append(detail)
            return
        gpa, offset = self.translate(va, "fetch")
        if not self.monitor.entry(gpa).executable:
            result = self.monitor.request_execute(gpa, offset)
            if isinstance(result, ExitEvent):
                if result.verdict is Verdict.EMULATED:
                    self._emulate_blocked(gpa, offset)
                    return
                raise GuestException("#PF", f"page {gpa:#x} may not execute", logged=True)
        code = self._code_at(va, gpa, offset)
        if code[0] == INT3:
            record = self.monitor.record_at(gpa, offset)
            if record is not None:
                self._trap_patch(record, gpa, offset)
                return
        execute(self.state, code, self)

    def _guest_fault(self, e: GuestException) -> None:
        if self.state.privileged:
            self._exit(
                ExitReason.NOT_PRESENT_FAULT,
                Verdict.ATTACK_DETECTED,
                eip=self.state.eip,
                source="privileged",
                vector=e.vector,
                detail=e.detail,
            )
            logging.warning(f"Exception {e.vector} in privileged mode, terminating the guest: {e.detail}")
            self.terminated = True
            return
        if not e.logged:
            self._exit(
                ExitReason.NOT_PRESENT_FAULT,
                Verdict.GUEST_FAULT,
                eip=self.state.eip,
                source="guest",
                vector=e.vector,
                detail=e.detail,
            )
        logging.debug(f"Guest fault {e.vector} at {self.state.eip:#x}: {e.detail}")
        self.fault = e

    def _guarded(self, action: Callable[[], Any]) -> Optional[ExitEvent]:
        """Run a hypervisor-visible action outside instruction execution."""
        mark = len(self.log)
        try:
            action()
        except _Stop:
            pass
        except GuestException as e:
            self._guest_fault(e)
        return self.log[len(self.log) - 1] if len(self.log) > mark else None

    def switch_cr3(self, value: int) -> Optional[ExitEvent]:
        """Load cr3 on behalf of the guest kernel; returns the exit it caused, if any."""
        if self.stopped:
            raise RuntimeError(f"Machine stopped at eip {self.state.eip:#x}")
        return self._guarded(lambda: self.load_cr3(value))

    def store(self, va: int, value: int) -> Optional[ExitEvent]:
        """A guest 32-bit store at ``va``; returns the exit it caused, if any."""
        if self.stopped:
            raise RuntimeError(f"Machine stopped at eip {self.state.eip:#x}")
        return self._guarded(lambda: self.write32(va, value))

    def clear_fault(self) -> Optional[GuestException]:
        """Let the guest kernel absorb a fault (or halt) so the CPU can run again.

        Raises
        ------
        RuntimeError
            If the guest was terminated or a privileged violation occurred
        """
        if self.terminated or self.violations:
            raise RuntimeError("A terminated guest cannot resume")
        fault, self.fault = self.fault, None
        self.state.halted = False
        return fault

    def step(self) -> StepResult:
        """Execute one instruction.

        Returns
        -------
        StepResult
            The last exit the step caused, or Progress

        Raises
        ------
        RuntimeError
            If the machine has stopped (halted, faulted or terminated)
        """
        if self.stopped:
            raise RuntimeError(f"Machine stopped at eip {self.state.eip:#x}")
        mark = len(self.log)
        try:
            self._tick_interrupts()
            if not self.stopped:
                self._step()
        except _Stop:
            pass
        except GuestException as e:
            self._guest_fault(e)
        self.steps += 1
        if len(self.log) > mark:
            return self.log[len(self.log) - 1]
        return Progress(self.state.eip)

    def run(
        self,
        max_steps: Optional[int] = None,
        until: Optional[Callable[["GuestMachine"], bool]] = None,
        stop_outside_driver: bool = False,
    ) -> int:
        """Step until stopped, ``until`` holds or a step budget runs out.

        Parameters
        ----------
        max_steps
            Step budget; if None the configured step limit applies and
            reaching it raises RuntimeError
        until
            Predicate checked before each step
        stop_outside_driver
            Stop when eip leaves the driver window in guest mode

        Returns
        -------
        int
            Steps executed
        """
        limit = self.config.step_limit if max_steps is None else max_steps
        n = 0
        while not self.stopped:
            if until is not None and until(self):
                break
            if stop_outside_driver and not self.state.privileged and not self.in_driver(self.state.eip):
                break
            if n >= limit:
                if max_steps is None:
                    raise RuntimeError(f"Step limit {limit} reached at eip {self.state.eip:#x}")
                break
            self.step()
            n += 1
        return n

    def fastio_call(self, body: Optional[Body] = None) -> CallResult:
        """Call the fastio driver from guest kernel mode and run it to completion.

        Parameters
        ----------
        body
            Work for the body hook (the machine's default if None)

        Returns
        -------
        CallResult
            CPU state after the call and the number of exits it took

        Raises
        ------
        ValueError
            If no driver is registered or the CPU is already privileged
        """
        if self.ppt is None:
            raise ValueError("No fastio driver is registered")
        if self.state.privileged:
            raise ValueError("fastio_call must start outside the privileged address space")
        if self.stopped:
            raise RuntimeError(f"Machine stopped at eip {self.state.eip:#x}")
        mark = len(self.log)
        saved = self.body_fn
        if body is not None:
            self.body_fn = body
        try:
            try:
                push(self.state, self, RETURN_ADDRESS)
            except _Stop:
                pass
            except GuestException as e:
                self._guest_fault(e)
            self.state.eip = self.driver_window[0]
            self.run(until=lambda m: m.state.eip == RETURN_ADDRESS and not m.state.privileged)
        finally:
            self.body_fn = saved
        self.calls += 1
        return CallResult(self.state, len(self.log) - mark)
