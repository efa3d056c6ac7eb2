"""The toy instruction set run by the simulated CPU.

Instructions use real 32-bit x86 encodings, restricted to what the guest
kernel, the fastio driver and the synthetic workloads need:

- ``nop``, ``pushf``, ``popf``, ``cli``, ``sti``, ``hlt``, ``int3``
- ``push r32`` / ``pop r32``, ``mov r32, imm32``
- ``mov r/m32, r32`` (0x89) and ``mov r32, r/m32`` (0x8b), register or
  ``[reg]`` operands only
- ``add eax, imm32`` and ``cmp eax, imm32`` (zero flag only)
- ``je`` / ``jne`` / ``jmp`` rel8, ``jmp`` / ``call`` rel32, ``ret``
- ``0f 20 /3`` loads cr3 from a register and ``0f 22 /3`` stores cr3 into
  one, following the opcode bytes of the default subtraction predicate
- ``vmcall`` (``0f 01 c1``) and the driver body hook (``0f 3f``)

Anything else raises :class:`GuestException` (``#UD``).
"""
from abc import ABC, abstractmethod
from typing import Optional

from fastio.scan import DEFAULT_PREDICATE, PatchRecord, decode_instruction, instruction_length
from fastio.types import PageData

from .state import FLAGS_FIXED, MASK32, MachineState

CR3_LOAD = tuple(DEFAULT_PREDICATE.prefix)
CR3_READ = (0x0F, 0x22)
CR3_INDEX = 3
VMCALL = bytes([0x0F, 0x01, 0xC1])
BODY_HOOK = bytes([0x0F, 0x3F])
INT3 = 0xCC
HLT = 0xF4


class GuestException(Exception):
    """A fault raised to the guest by the simulated CPU.

    Parameters
    ----------
    vector
        Exception mnemonic (``#PF``, ``#UD``, ``#GP``, ``#AC``)
    detail
        What went wrong
    logged
        Whether the hypervisor already logged an exit for the fault
    """

    def __init__(self, vector: str, detail: str, logged: bool = False) -> None:
        super().__init__(f"{vector}: {detail}")
        self.vector = vector
        self.detail = detail
        self.logged = logged


class Bus(ABC):
    """What instructions can reach outside the register file."""

    @abstractmethod
    def read32(self, va: int) -> int:
        pass

    @abstractmethod
    def write32(self, va: int, value: int) -> None:
        pass

    @abstractmethod
    def load_cr3(self, value: int) -> object:
        pass

    @abstractmethod
    def hypercall(self) -> None:
        pass

    @abstractmethod
    def body(self) -> None:
        pass

    @abstractmethod
    def breakpoint(self) -> None:
        pass


def decode_length(code: PageData) -> Optional[int]:
    """Length of the toy instruction at the start of ``code``.

    >>> decode_length(bytes([0x0F, 0x3F, 0x89, 0xD4]))
    2
    >>> decode_length(bytes([0x0F, 0x20, 0xD8]))
    3
    """
    code = bytes(code)
    if code[: len(BODY_HOOK)] == BODY_HOOK:
        return len(BODY_HOOK)
    return instruction_length(code)


def _imm32(code: bytes, pos: int) -> int:
    return int.from_bytes(code[pos : pos + 4], "little")


def _rel8(code: bytes, pos: int) -> int:
    v = code[pos]
    return v - 0x100 if v & 0x80 else v


def _rel32(code: bytes, pos: int) -> int:
    return int.from_bytes(code[pos : pos + 4], "little", signed=True)


def push(state: MachineState, bus: Bus, value: int) -> None:
    state.esp = state.esp - 4
    bus.write32(state.esp, value)


def pop(state: MachineState, bus: Bus) -> int:
    value = bus.read32(state.esp)
    state.esp = state.esp + 4
    return value


def _modrm_operand(state: MachineState, modrm: int, where: str) -> Optional[int]:
    """Address of a ``[reg]`` operand, or None for a register operand."""
    mod, rm = modrm >> 6, modrm & 7
    if mod == 3:
        return None
    if mod == 0 and rm not in (4, 5):
        return state.regs[rm]
    raise GuestException("#UD", f"addressing mode {modrm:#04x} at {where} is outside the toy ISA")


def execute(state: MachineState, code: PageData, bus: Bus) -> None:
    """Execute the instruction at the start of ``code`` located at ``state.eip``.

    Advances ``eip`` past the instruction (or to a branch target).

    Raises
    ------
    GuestException
        If the bytes do not encode a toy instruction, or a memory access faults
    """
    code = bytes(code)
    where = f"{state.eip:#x}"
    length = decode_length(code)
    if length is None:
        raise GuestException("#UD", f"undecodable bytes {code[:4].hex()} at {where}")
    op = code[0]
    nxt = (state.eip + length) & MASK32
    target = nxt
    if op == 0x90:
        pass
    elif op == 0x9C:
        push(state, bus, state.flags)
    elif op == 0x9D:
        state.flags = pop(state, bus) | FLAGS_FIXED
    elif op == 0xFA:
        state.interrupt_flag = False
    elif op == 0xFB:
        state.interrupt_flag = True
    elif op == HLT:
        state.halted = True
    elif op == INT3:
        bus.breakpoint()
    elif 0x50 <= op <= 0x57:
        push(state, bus, state.regs[op - 0x50])
    elif 0x58 <= op <= 0x5F:
        value = pop(state, bus)
        state.regs[op - 0x58] = value & MASK32
    elif 0xB8 <= op <= 0xBF:
        state.regs[op - 0xB8] = _imm32(code, 1)
    elif op == 0x05:
        state.eax = state.eax + _imm32(code, 1)
        state.zero_flag = state.eax == 0
    elif op == 0x3D:
        state.zero_flag = state.eax == _imm32(code, 1)
    elif op in (0x89, 0x8B):
        modrm = code[1]
        reg = (modrm >> 3) & 7
        addr = _modrm_operand(state, modrm, where)
        if op == 0x89:
            if addr is None:
                state.regs[modrm & 7] = state.regs[reg]
            else:
                bus.write32(addr, state.regs[reg])
        else:
            state.regs[reg] = state.regs[modrm & 7] if addr is None else bus.read32(addr) & MASK32
    elif op == 0x74:
        if state.zero_flag:
            target = nxt + _rel8(code, 1)
    elif op == 0x75:
        if not state.zero_flag:
            target = nxt + _rel8(code, 1)
    elif op == 0xEB:
        target = nxt + _rel8(code, 1)
    elif op == 0xE9:
        target = nxt + _rel32(code, 1)
    elif op == 0xE8:
        push(state, bus, nxt)
        target = nxt + _rel32(code, 1)
    elif op == 0xC3:
        target = pop(state, bus)
    elif op == 0x0F:
        _execute_two_byte(state, code, bus, where)
    else:
        raise GuestException("#UD", f"opcode {op:#04x} at {where} is outside the toy ISA")
    state.eip = target & MASK32


def _execute_two_byte(state: MachineState, code: bytes, bus: Bus, where: str) -> None:
    op2 = code[1]
    if (code[0], op2) in (CR3_LOAD, CR3_READ):
        modrm = code[2]
        if (modrm >> 3) & 7 != CR3_INDEX:
            raise GuestException("#UD", f"control register {(modrm >> 3) & 7} at {where} is not modeled")
        if (code[0], op2) == CR3_LOAD:
            bus.load_cr3(state.regs[modrm & 7])
        else:
            state.regs[modrm & 7] = state.cr3 & MASK32
    elif code[:3] == VMCALL:
        bus.hypercall()
    elif code[:2] == BODY_HOOK:
        bus.body()
    else:
        raise GuestException("#UD", f"opcode 0f {op2:02x} at {where} is outside the toy ISA")


def is_cr3_load(code: PageData) -> bool:
    """Whether ``code`` starts with a toy cr3 load."""
    code = bytes(code)
    return len(code) >= 3 and tuple(code[:2]) == CR3_LOAD and (code[2] >> 3) & 7 == CR3_INDEX


def emulate_patched(
    record: PatchRecord,
    machine: MachineState,
    bus: Bus,
    window_offset: int,
    window: Optional[PageData] = None,
) -> MachineState:
    """Emulate the original instruction behind an int3 patch.

    Parameters
    ----------
    record
        The record owning the trapping int3
    machine
        CPU state, ``eip`` at the trapping byte
    bus
        Memory and cr3 access for the emulated instruction
    window_offset
        Offset of the trapping byte in the record's window (page plus
        successor page for straddles)
    window
        Original (unpatched) window content, used when the guest jumped into
        the middle of the patched instruction

    Returns
    -------
    MachineState
        ``machine``, advanced as if the original bytes executed

    Raises
    ------
    GuestException
        If the record carries no emulation spec or no original instruction
        can be reconstructed at the trap
    """
    spec = record.emulation_spec
    if spec is None:
        raise GuestException(
            "#UD", f"patch at page {record.page_index:#x} offset {window_offset} has no emulation spec"
        )
    instr = spec.at(window_offset)
    if instr is None and window is not None:
        instr = decode_instruction(window, window_offset)
    if instr is None:
        raise GuestException(
            "#UD", f"no original instruction at page {record.page_index:#x} offset {window_offset}"
        )
    execute(machine, instr.code, bus)
    return machine
