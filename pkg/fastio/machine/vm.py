"""A whole guest: kernel, processes, the fastio driver and the hypervisor state guarding them."""
import logging
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence

from fastio.ept import (
    LEAF_DEFAULT,
    PTE_EXEC,
    PTE_PRESENT,
    PTE_USER,
    PTE_WRITE,
    EptConfig,
    EptMonitor,
    ExitEvent,
    ExitReason,
    GuestMemory,
    GuestPageTable,
    PageTableBuilder,
    PrivilegedPageTable,
    Verdict,
    make_entry,
)
from fastio.layout import (
    DEFAULT_DIGEST,
    AttestationResult,
    GuestIdBitmap,
    PptLayout,
    SlabMap,
    SlabRegistry,
    attest_driver,
)
from fastio.scan import DEFAULT_PREDICATE, OpcodePredicate
from fastio.types import PAGE_SIZE

from .cpu import Body, CallResult, GuestMachine
from .driver import DriverImage, assemble_driver
from .isa import CR3_LOAD
from .state import MachineState
from .workload import CLEAN, USER_CODE_VA, user_code

# Offsets from the kernel base
IDT_OFFSET = 0x1000
KERNEL_STACK_OFFSET = 0x400000
DRIVER_OFFSET = 0x100000
ATTACK_CODE_OFFSET = 0x2000

USER_STACK_VA = 0x0BFFF000
USER_STACK_TOP = USER_STACK_VA + PAGE_SIZE

# first RAM page handed out to the guest
FIRST_FREE_PAGE = 0x100

DEFAULT_RING_PAGES = 1
DEFAULT_BUFFERS = 16

USER_LEAF = LEAF_DEFAULT | PTE_USER
KERNEL_DATA = PTE_PRESENT | PTE_WRITE


def device_probe(machine: GuestMachine) -> None:
    """Default driver body: touch the first device page through the PPT."""
    machine.read32(machine.monitor.layout.pdva)


class GuestProcess(NamedTuple):
    """A guest process: its own user half over the shared kernel half.

    Parameters
    ----------
    name
        Scenario-level name
    root
        Root page of its page table
    code_pages
        Guest-physical code pages, mapped from :data:`USER_CODE_VA`
    stack_page
        Guest-physical page of its user stack
    parent
        Name of the forking process, if any
    """

    name: str
    root: int
    code_pages: List[int]
    stack_page: int
    parent: Optional[str] = None

    @property
    def cr3(self) -> int:
        return self.root << 12


class GuestVm:
    """One simulated guest under the fastio hypervisor.

    Owns guest memory, the EPT monitor, slab registrations, fastio ids and a
    single vCPU. The guest kernel occupies the upper quarter of every address
    space (shared directory entries from ``kernel_base`` up); each process
    adds its own user half.

    Parameters
    ----------
    layout
        PPT geometry
    predicate
        Subtracted opcode predicate (must match the toy cr3 load)
    digest
        Attestation digest algorithm
    ept
        Settings merged into :class:`fastio.ept.EptConfig`
    body
        Driver body work (touches the device window by default)
    kwargs
        Settings merged into :class:`fastio.machine.cpu.MachineConfig`
    """

    def __init__(
        self,
        layout: PptLayout = PptLayout(),
        predicate: OpcodePredicate = DEFAULT_PREDICATE,
        digest: str = DEFAULT_DIGEST,
        ept: Optional[Mapping[str, Any]] = None,
        body: Optional[Body] = None,
        **kwargs: Any,
    ) -> None:
        if not predicate.validate().matches(bytes(CR3_LOAD) + b"\xd8"):
            raise ValueError(f"Predicate {predicate} does not match the guest's cr3-load encoding")
        self.layout = layout.validate()
        self.predicate = predicate
        self.digest = digest
        ept_config = EptConfig(**dict(ept or {}))  # type: ignore
        self.memory = GuestMemory(ram_pages=ept_config.ram_pages, first_free_page=FIRST_FREE_PAGE)
        self.registry = SlabRegistry(self.layout)
        self.ids = GuestIdBitmap(self.layout.max_guests)
        self.monitor = EptMonitor(self.memory, self.layout, self.registry, predicate, **ept_config._asdict())
        self.machine = GuestMachine(self.monitor, body=body or device_probe, **kwargs)
        self.processes: Dict[str, GuestProcess] = {}
        self.driver: Optional[DriverImage] = None
        self.guest_id: Optional[int] = None
        self._attack_page: Optional[int] = None
        self._build_kernel()

    # Addresses

    @property
    def kernel_base(self) -> int:
        return self.layout.kernel_base

    @property
    def idt_va(self) -> int:
        return self.kernel_base + IDT_OFFSET

    @property
    def driver_va(self) -> int:
        return self.kernel_base + DRIVER_OFFSET

    @property
    def kernel_stack_top(self) -> int:
        return self.kernel_base + KERNEL_STACK_OFFSET + PAGE_SIZE

    @property
    def ppt_cr3(self) -> Optional[int]:
        return self.machine.ppt_cr3

    @property
    def log(self) -> Any:
        return self.monitor.log

    # Page tables

    def _build_kernel(self) -> None:
        self.kernel = PageTableBuilder(self.memory)
        text = self.memory.alloc_page()
        self.memory.write(text, 0, bytes([0xF4]) * PAGE_SIZE)
        self.kernel.map(self.kernel_base, text, PTE_PRESENT | PTE_EXEC)
        self.kernel.map(self.idt_va, self.memory.alloc_page(), KERNEL_DATA)
        self.kernel.map(self.kernel_base + KERNEL_STACK_OFFSET, self.memory.alloc_page(), KERNEL_DATA)

    def _table_write(self, table: int, index: int, value: int) -> Optional[ExitEvent]:
        """A guest kernel write of one table entry (intercepted if the table is protected)."""
        return self.monitor.guest_write(table, index * 4, value.to_bytes(4, "little"))

    def _map(self, root: int, va: int, gpa_page: int, flags: int) -> List[ExitEvent]:
        builder = PageTableBuilder(self.memory, root)
        events = []
        for table, index, value in builder.plan_map(va, gpa_page, flags):
            event = self._table_write(table, index, value)
            if event is not None:
                events.append(event)
        return events

    def _user_leaves(self, root: int) -> List[Any]:
        kernel_page = self.kernel_base // PAGE_SIZE
        return [m for m in GuestPageTable(self.memory, root).walk().leaves if m.va_page < kernel_page]

    def _set_leaf(self, root: int, va_page: int, value: int) -> Optional[ExitEvent]:
        table = GuestPageTable(self.memory, root).leaf_table(va_page >> 10)
        if table is None:
            raise ValueError(f"No page table covers va {va_page << 12:#x} in root {root:#x}")
        return self._table_write(table, va_page & 0x3FF, value)

    # Driver

    def load_driver(
        self,
        certificate: Optional[str] = None,
        n_pages: int = 1,
        ring_pages: int = DEFAULT_RING_PAGES,
        n_buffers: int = DEFAULT_BUFFERS,
        register_rings: bool = True,
    ) -> AttestationResult:
        """Load, attest and register the fastio driver.

        The driver announces its pages by hypercall, the monitor write-protects
        them, the code is attested and, once Trusted, subtraction is activated,
        the device window is backed, the PPT is built from the kernel half and
        pinned in the CR3 target controls, and the guest gets a fastio id.

        Parameters
        ----------
        certificate
            Expected digest (the image's own digest if None)
        n_pages
            Driver code pages
        ring_pages
            Ring pages registered in the guest's slab
        n_buffers
            Packet buffers registered after the ring pages
        register_rings
            Whether to register rings and buffers right away

        Returns
        -------
        AttestationResult
            The attestation verdict; a Rejected driver is never registered

        Raises
        ------
        ValueError
            If a driver is already registered
        """
        if self.driver is not None:
            raise ValueError("A fastio driver is already registered")
        ppt_page = self.memory.alloc_page()
        code_gpas = [self.memory.alloc_page() for _ in range(n_pages)]
        image = assemble_driver(ppt_page << 12, self.layout.private_stack_top(0), n_pages)
        designated = {}
        for i, (gpa, page) in enumerate(zip(code_gpas, image.code_pages)):
            self.memory.write(gpa, 0, page)
            va = self.driver_va + i * PAGE_SIZE
            self._map(self.kernel.root, va, gpa, PTE_PRESENT | PTE_EXEC)
            designated[gpa] = va // PAGE_SIZE
        ppt_va = self.driver_va + n_pages * PAGE_SIZE
        self._map(self.kernel.root, ppt_va, ppt_page, PTE_PRESENT)
        designated[ppt_page] = ppt_va // PAGE_SIZE
        self.log.append(
            ExitEvent.make(
                ExitReason.HYPERCALL,
                Verdict.RESUMED,
                op="announce-driver",
                code_pages=len(code_gpas),
                read_only_pages=1,
            )
        )
        self.monitor.protect_driver(code_gpas, [ppt_page], designated)
        result = attest_driver(
            image.code_pages,
            certificate if certificate is not None else image.certificate(self.digest),
            self.predicate,
            self.digest,
            allowed_sites=image.load_sites,
        )
        if not result.trusted:
            logging.warning(f"fastio driver not registered: {result.reason}")
            return result
        self.monitor.activate_subtraction()
        self.monitor.map_device_window()
        ppt = PrivilegedPageTable.from_kernel_table(
            self.layout, ppt_page, GuestPageTable(self.memory, self.kernel.root), self.idt_va // PAGE_SIZE
        )
        self.machine.attach_driver(ppt, (self.driver_va, self.driver_va + image.length))
        self.driver = image
        self.guest_id = self.ids.allocate()
        self.registry.mark_attested(self.guest_id)
        if register_rings:
            self.register_rings(ring_pages, n_buffers)
        logging.info(f"fastio driver registered for guest {self.guest_id}, PPT root {ppt_page:#x}")
        return result

    def register_rings(
        self, ring_pages: int = DEFAULT_RING_PAGES, n_buffers: int = DEFAULT_BUFFERS, buffer_size: int = 2048
    ) -> SlabMap:
        """Register fresh ring and buffer pages in this guest's slab."""
        if self.guest_id is None:
            raise ValueError("Register the fastio driver before its rings")
        n_pages = ring_pages + -(-n_buffers * buffer_size // PAGE_SIZE)
        pages: Sequence[int] = [self.memory.alloc_page() for _ in range(n_pages)]
        return self.registry.register_guest_rings(self.guest_id, pages, ring_pages, buffer_size)

    def unload_driver(self) -> None:
        """Release the guest's slab and fastio id."""
        if self.guest_id is None:
            raise ValueError("No fastio driver is registered")
        if self.guest_id in self.registry.slabs:
            self.registry.unregister(self.guest_id)
        self.monitor.release_slab(self.guest_id)
        self.ids.free(self.guest_id)
        self.guest_id = None

    # Processes

    def process(self, name: str) -> GuestProcess:
        try:
            return self.processes[name]
        except KeyError:
            raise ValueError(f"Unknown process {name!r}") from None

    def create_process(self, name: str, n_pages: int = 1, code: str = CLEAN) -> GuestProcess:
        """Build a process with ``n_pages`` of user code of the given kind."""
        if name in self.processes:
            raise ValueError(f"Process {name!r} already exists")
        pages = user_code(code, n_pages)
        builder = PageTableBuilder(self.memory)
        builder.share_directory(self.kernel.root, self.kernel_base >> 22)
        code_pages = []
        for i, content in enumerate(pages):
            gpa = self.memory.alloc_page()
            self.memory.write(gpa, 0, content)
            builder.map(USER_CODE_VA + i * PAGE_SIZE, gpa, USER_LEAF)
            code_pages.append(gpa)
        stack = self.memory.alloc_page()
        builder.map(USER_STACK_VA, stack, PTE_PRESENT | PTE_WRITE | PTE_USER)
        process = GuestProcess(name, builder.root, code_pages, stack)
        self.processes[name] = process
        logging.debug(f"Created process {name} (root {builder.root:#x}, {len(pages)} code pages)")
        return process

    def boot(self, name: str) -> None:
        """Start the vCPU in ``name``'s address space, in kernel mode."""
        process = self.process(name)
        self.machine.boot(process.cr3)
        state = self.machine.state
        state.eip = self.kernel_base
        state.esp = self.kernel_stack_top
        state.user = False

    def switch_to(self, name: str) -> Optional[ExitEvent]:
        """Context switch to ``name`` (a guest cr3 load)."""
        process = self.process(name)
        if self.machine.state.cr3 == process.cr3:
            return None
        return self.machine.switch_cr3(process.cr3)

    def exec(self, name: str, page: int = 0, steps: int = 100) -> int:
        """Run ``name``'s user code from code page ``page`` for up to ``steps`` instructions.

        The CPU returns to kernel mode afterwards; a fault in the process is
        absorbed by the guest kernel.

        Returns
        -------
        int
            Instructions executed
        """
        process = self.process(name)
        if not 0 <= page < len(process.code_pages):
            raise ValueError(f"Process {name!r} has no code page {page}")
        self.switch_to(name)
        machine = self.machine
        if machine.stopped:
            return 0
        state = machine.state
        saved = (state.eip, state.esp)
        state.user = True
        state.eip = USER_CODE_VA + page * PAGE_SIZE
        state.esp = USER_STACK_TOP
        n = machine.run(max_steps=steps)
        if machine.terminated or machine.violations:
            return n
        fault = machine.clear_fault()
        if fault is not None:
            logging.debug(f"Process {name} faulted: {fault}")
        state = machine.state
        state.eip, state.esp = saved
        state.user = False
        return n

    def write(self, name: str, page: int, offset: int, data: bytes) -> Optional[ExitEvent]:
        """The guest overwrites bytes of one of ``name``'s code pages."""
        process = self.process(name)
        if not 0 <= page < len(process.code_pages):
            raise ValueError(f"Process {name!r} has no code page {page}")
        return self.monitor.guest_write(process.code_pages[page], offset, data)

    def map_page(self, name: str, page: int, code: str = CLEAN) -> List[ExitEvent]:
        """Map a fresh code page at index ``page`` of ``name``'s code."""
        process = self.process(name)
        gpa = self.memory.alloc_page()
        self.memory.write(gpa, 0, user_code(code, 1)[0])
        events = self._map(process.root, USER_CODE_VA + page * PAGE_SIZE, gpa, USER_LEAF)
        if page >= len(process.code_pages):
            process.code_pages.extend([gpa] * (page + 1 - len(process.code_pages)))
        else:
            process.code_pages[page] = gpa
        return events

    def unmap_page(self, name: str, page: int) -> Optional[ExitEvent]:
        """Clear the mapping of code page ``page`` of ``name``."""
        process = self.process(name)
        return self._set_leaf(process.root, (USER_CODE_VA + page * PAGE_SIZE) // PAGE_SIZE, 0)

    def fork(self, parent: str, child: str) -> GuestProcess:
        """Fork ``parent``: the child shares its code copy-on-write.

        Every writable user leaf of the parent is write-protected (an
        intercepted table write each once the parent's table is protected); the
        child's fresh table maps the same pages read-only plus its own stack.
        """
        if child in self.processes:
            raise ValueError(f"Process {child!r} already exists")
        source = self.process(parent)
        builder = PageTableBuilder(self.memory)
        builder.share_directory(self.kernel.root, self.kernel_base >> 22)
        stack_va_page = USER_STACK_VA // PAGE_SIZE
        for m in self._user_leaves(source.root):
            if m.va_page == stack_va_page:
                continue
            cow = m.flags & ~PTE_WRITE
            if m.flags & PTE_WRITE:
                self._set_leaf(source.root, m.va_page, make_entry(m.gpa_page, cow))
            builder.map(m.va_page * PAGE_SIZE, m.gpa_page, cow)
        stack = self.memory.alloc_page()
        builder.map(USER_STACK_VA, stack, PTE_PRESENT | PTE_WRITE | PTE_USER)
        process = GuestProcess(child, builder.root, list(source.code_pages), stack, parent)
        self.processes[child] = process
        return process

    def exit_process(self, name: str) -> int:
        """Tear down ``name``'s user mappings and forget its address space.

        A forked child gives write access back to its parent's pages.

        Returns
        -------
        int
            Table writes performed
        """
        process = self.process(name)
        if self.machine.state.cr3 == process.cr3:
            raise ValueError(f"Process {name!r} is running; switch away before it exits")
        writes = 0
        for m in self._user_leaves(process.root):
            self._set_leaf(process.root, m.va_page, 0)
            writes += 1
        if process.parent is not None and process.parent in self.processes:
            parent = self.processes[process.parent]
            for m in self._user_leaves(parent.root):
                if not m.flags & PTE_WRITE:
                    self._set_leaf(parent.root, m.va_page, make_entry(m.gpa_page, m.flags | PTE_WRITE))
                    writes += 1
        self.machine.state.cr3_targets.forget(process.cr3)
        del self.processes[name]
        active = [p.root for p in self.processes.values()] + [self.kernel.root]
        self.monitor.release_unreachable(active)
        return writes

    # fastio

    def fastio(self, n_calls: int = 1, body: Optional[Body] = None) -> List[CallResult]:
        """Make ``n_calls`` fastio calls from the current process's kernel context."""
        results = []
        for _ in range(n_calls):
            if self.machine.stopped:
                break
            results.append(self.machine.fastio_call(body))
        return results

    def attack_code(self) -> int:
        """Virtual address of kernel code that loads the PPT root outside the driver.

        The page holds ``mov eax, PPT; mov cr3, eax; hlt`` and is created on
        first use.
        """
        if self.ppt_cr3 is None:
            raise ValueError("No fastio driver is registered")
        va = self.kernel_base + ATTACK_CODE_OFFSET
        if self._attack_page is None:
            gpa = self.memory.alloc_page()
            code = b"\xb8" + self.ppt_cr3.to_bytes(4, "little") + bytes(CR3_LOAD) + b"\xd8\xf4"
            self.memory.write(gpa, 0, code + bytes([0xF4]) * (PAGE_SIZE - len(code)))
            self._map(self.kernel.root, va, gpa, PTE_PRESENT | PTE_EXEC)
            self._attack_page = gpa
        return va

    # Snapshots

    def snapshot(self) -> MachineState:
        return self.machine.snapshot()

    def restore(self, state: MachineState) -> None:
        self.machine.restore(state)
