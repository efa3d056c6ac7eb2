"""Instruction-length decoding over a documented subset of 32-bit x86.

The subset covers single-byte opcodes without operands, ModRM/SIB addressing,
imm8/imm16/imm32 immediates and a handful of ``0x0f`` two-byte opcodes. There
is no support for legacy prefixes (segment overrides, ``0x66``/``0x67``,
``rep``/``lock``), so any such byte decodes as unsupported.

Moves to and from control/debug registers (``0x0f 0x20..0x23``) always take
three bytes: the CPU ignores the ModRM ``mod`` field for these opcodes.
"""
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

from fastio.types import PageData

# opcode -> (has_modrm, immediate_size)
_ONE_BYTE: Dict[int, Tuple[bool, int]] = {}
_TWO_BYTE: Dict[int, Tuple[bool, int]] = {}


def _define(table: Dict[int, Tuple[bool, int]], opcodes: Sequence[int], modrm: bool, imm: int) -> None:
    for op in opcodes:
        table[op] = (modrm, imm)


# ALU families: op r/m,r / op r,r/m (0x00-0x3b) and op al/eax,imm
for _base in range(0x00, 0x40, 0x08):
    _define(_ONE_BYTE, range(_base, _base + 4), True, 0)
    _define(_ONE_BYTE, [_base + 4], False, 1)
    _define(_ONE_BYTE, [_base + 5], False, 4)
_define(_ONE_BYTE, range(0x40, 0x60), False, 0)  # inc/dec/push/pop reg
_define(_ONE_BYTE, [0x68], False, 4)  # push imm32
_define(_ONE_BYTE, [0x69], True, 4)  # imul r,r/m,imm32
_define(_ONE_BYTE, [0x6A], False, 1)  # push imm8
_define(_ONE_BYTE, [0x6B], True, 1)  # imul r,r/m,imm8
_define(_ONE_BYTE, range(0x70, 0x80), False, 1)  # jcc rel8
_define(_ONE_BYTE, [0x80, 0x83], True, 1)  # group 1 imm8
_define(_ONE_BYTE, [0x81], True, 4)  # group 1 imm32
_define(_ONE_BYTE, range(0x84, 0x8C), True, 0)  # test/xchg/mov
_define(_ONE_BYTE, [0x8D, 0x8F], True, 0)  # lea, pop r/m
_define(_ONE_BYTE, range(0x90, 0x9A), False, 0)  # nop/xchg eax, cwde, cdq
_define(_ONE_BYTE, [0x9C, 0x9D], False, 0)  # pushf/popf
_define(_ONE_BYTE, [0xA8], False, 1)  # test al,imm8
_define(_ONE_BYTE, [0xA9], False, 4)  # test eax,imm32
_define(_ONE_BYTE, range(0xB0, 0xB8), False, 1)  # mov r8,imm8
_define(_ONE_BYTE, range(0xB8, 0xC0), False, 4)  # mov r32,imm32
_define(_ONE_BYTE, [0xC0, 0xC1, 0xC6], True, 1)  # shifts imm8, mov r/m8,imm8
_define(_ONE_BYTE, [0xC2], False, 2)  # ret imm16
_define(_ONE_BYTE, [0xC3, 0xC9, 0xCC, 0xF4], False, 0)  # ret, leave, int3, hlt
_define(_ONE_BYTE, [0xC7], True, 4)  # mov r/m32,imm32
_define(_ONE_BYTE, [0xCD], False, 1)  # int imm8
_define(_ONE_BYTE, [0xD0, 0xD1, 0xD2, 0xD3], True, 0)  # shifts by 1/cl
_define(_ONE_BYTE, [0xE8, 0xE9], False, 4)  # call/jmp rel32
_define(_ONE_BYTE, [0xEB], False, 1)  # jmp rel8
_define(_ONE_BYTE, range(0xF8, 0xFE), False, 0)  # clc..std, cli, sti
_define(_ONE_BYTE, [0xFE, 0xFF], True, 0)  # group 4/5

_define(_TWO_BYTE, [0x01, 0x1F], True, 0)  # group 7 (vmcall, lgdt, ...), nop r/m
_define(_TWO_BYTE, [0x0B, 0x31, 0xA2], False, 0)  # ud2, rdtsc, cpuid
_define(_TWO_BYTE, range(0x40, 0x50), True, 0)  # cmovcc
_define(_TWO_BYTE, range(0x80, 0x90), False, 4)  # jcc rel32
_define(_TWO_BYTE, range(0x90, 0xA0), True, 0)  # setcc
_define(_TWO_BYTE, [0xAF, 0xB6, 0xB7, 0xBE, 0xBF], True, 0)  # imul, movzx, movsx

_CONTROL_REGISTER_MOVES = frozenset(range(0x20, 0x24))

MAX_INSTRUCTION_LENGTH = 15


class Instruction(NamedTuple):
    """A decoded instruction.

    Parameters
    ----------
    offset
        Offset of the first byte within the decoded window
    code
        The instruction's bytes
    """

    offset: int
    code: bytes

    @property
    def length(self) -> int:
        """Instruction length in bytes."""
        return len(self.code)

    @property
    def end(self) -> int:
        """Offset one past the last byte."""
        return self.offset + len(self.code)


class Known(NamedTuple):
    """Boundary recovered: the instruction containing the hit starts here."""

    instr_start: int


class Unknown(NamedTuple):
    """Boundary not recoverable from the known instruction starts."""

    deferred_exits: int = 0


BoundaryResult = Union[Known, Unknown]


def _modrm_extra(code: bytes, pos: int) -> Optional[int]:
    """Bytes following the ModRM byte (SIB plus displacement)."""
    if pos >= len(code):
        return None
    modrm = code[pos]
    mod, rm = modrm >> 6, modrm & 7
    if mod == 3:
        return 0
    extra = 0
    if rm == 4:
        if pos + 1 >= len(code):
            return None
        extra += 1
        if mod == 0 and (code[pos + 1] & 7) == 5:
            extra += 4
    elif mod == 0 and rm == 5:
        extra += 4
    if mod == 1:
        extra += 1
    elif mod == 2:
        extra += 4
    return extra


def instruction_length(code: PageData, pos: int = 0) -> Optional[int]:
    """Length of the instruction starting at ``pos``.

    Parameters
    ----------
    code
        Code bytes
    pos
        Offset of the instruction's first byte

    Returns
    -------
    Optional[int]
        Length in bytes, or None if the encoding is outside the supported subset
        or runs past the end of ``code``

    Examples
    --------
    >>> instruction_length(bytes([0xB8, 0x0F, 0x20, 0x18, 0x00]))
    5
    >>> instruction_length(bytes([0x0F, 0x20, 0x18]))
    3
    >>> instruction_length(bytes([0x66, 0x90])) is None
    True
    """
    code = bytes(code)
    if pos >= len(code):
        return None
    op = code[pos]
    if op == 0x0F:
        if pos + 1 >= len(code):
            return None
        op2 = code[pos + 1]
        if op2 in _CONTROL_REGISTER_MOVES:
            length = 3
        elif op2 in _TWO_BYTE:
            modrm, imm = _TWO_BYTE[op2]
            length = 2 + imm
            if modrm:
                extra = _modrm_extra(code, pos + 2)
                if extra is None:
                    return None
                length += 1 + extra
        else:
            return None
    elif op in (0xF6, 0xF7):
        extra = _modrm_extra(code, pos + 1)
        if extra is None:
            return None
        reg = (code[pos + 1] >> 3) & 7
        imm = (1 if op == 0xF6 else 4) if reg in (0, 1) else 0
        length = 2 + extra + imm
    elif op in _ONE_BYTE:
        modrm, imm = _ONE_BYTE[op]
        length = 1 + imm
        if modrm:
            extra = _modrm_extra(code, pos + 1)
            if extra is None:
                return None
            length += 1 + extra
    else:
        return None
    if pos + length > len(code):
        return None
    return length


def decode_instruction(code: PageData, pos: int = 0) -> Optional[Instruction]:
    """Decode the instruction at ``pos``, or None if unsupported/truncated."""
    code = bytes(code)
    length = instruction_length(code, pos)
    if length is None:
        return None
    return Instruction(offset=pos, code=code[pos : pos + length])


def decode_span(code: PageData, start: int, end: int) -> Tuple[Instruction, ...]:
    """Decode consecutive instructions from ``start`` until one reaches ``end``.

    Stops early (returning what was decoded) at the first unsupported encoding.
    """
    code = bytes(code)
    instructions: List[Instruction] = []
    pos = start
    while pos < end:
        instr = decode_instruction(code, pos)
        if instr is None:
            break
        instructions.append(instr)
        pos = instr.end
    return tuple(instructions)


def find_boundary(
    code_window: PageData, known_predecessor_eip: int, hit_offset: int
) -> BoundaryResult:
    """Recover the start of the instruction whose span includes ``hit_offset``.

    Decodes forward from a known instruction start.

    Parameters
    ----------
    code_window
        Code bytes containing both offsets
    known_predecessor_eip
        Offset of a known instruction start, at or before ``hit_offset``
    hit_offset
        Offset of the first byte of the hit

    Returns
    -------
    BoundaryResult
        ``Known(instr_start)`` or ``Unknown()`` if decoding leaves the supported
        subset before reaching the hit

    Raises
    ------
    ValueError
        If the offsets violate ``known_predecessor_eip <= hit_offset < len(window)``

    Examples
    --------
    >>> find_boundary(bytes([0x90, 0xB8, 0x0F, 0x20, 0x18, 0x00]), 0, 2)
    Known(instr_start=1)
    """
    code = bytes(code_window)
    if not 0 <= known_predecessor_eip <= hit_offset < len(code):
        raise ValueError(
            f"Invalid boundary search: eip {known_predecessor_eip}, hit {hit_offset}, "
            f"window of {len(code)} bytes"
        )
    pos = known_predecessor_eip
    while True:
        length = instruction_length(code, pos)
        if length is None:
            return Unknown()
        if pos + length > hit_offset:
            return Known(pos)
        pos += length
