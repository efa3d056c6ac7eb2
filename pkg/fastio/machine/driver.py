"""The fastio driver image.

The driver code is the only guest code allowed to hold the cr3-load opcode:
once on the way into the privileged address space and once on the way out::

     0  pushf                 save flags
     1  cli                   no interrupts while the PPT is live
     2  mov ebx, cr3          remember the caller's address space
     5  mov eax, PPT          PPT root
    10  mov cr3, eax          enter (load site 1)
    13  mov edx, esp          save the caller's stack
    15  mov esp, PSTK         switch to the CPU-private stack
    20  <body>                txsync / rxsync
    22  mov esp, edx          restore the stack
    24  mov eax, ebx
    26  mov cr3, eax          leave (load site 2)
    29  mov eax, cr3
    32  cmp eax, PPT          still privileged?
    37  jne 42
    39  vmcall                alert the hypervisor
    42  popf
    43  ret
"""
from typing import List, NamedTuple, Tuple

from fastio.layout import DEFAULT_DIGEST, code_digest
from fastio.types import PAGE_SIZE

from .isa import BODY_HOOK, CR3_LOAD, CR3_READ, VMCALL

ENTRY_OFFSET = 0
ENTRY_LOAD_OFFSET = 10
BODY_OFFSET = 20
EXIT_LOAD_OFFSET = 26
HYPERCALL_OFFSET = 39
RET_OFFSET = 43

# int3 padding after the last instruction
PADDING = 0xCC

# ModRM bytes selecting cr3 with a register operand
_MODRM_EAX = 0xD8
_MODRM_EBX = 0xDB


class DriverImage(NamedTuple):
    """An assembled driver.

    Parameters
    ----------
    code
        Code bytes, padded to whole pages
    ppt_cr3
        cr3 value of the PPT root baked into the code
    private_stack_top
        Initial stack pointer of the CPU-private stack
    """

    code: bytes
    ppt_cr3: int
    private_stack_top: int

    @property
    def code_pages(self) -> List[bytes]:
        return [self.code[i : i + PAGE_SIZE] for i in range(0, len(self.code), PAGE_SIZE)]

    @property
    def load_sites(self) -> Tuple[int, int]:
        """Offsets of the two cr3 loads."""
        return ENTRY_LOAD_OFFSET, EXIT_LOAD_OFFSET

    @property
    def length(self) -> int:
        """Bytes of actual instructions (before padding)."""
        return RET_OFFSET + 1

    def certificate(self, algorithm: str = DEFAULT_DIGEST) -> str:
        """Digest a certificate for this exact image carries."""
        return code_digest(self.code_pages, algorithm)


def _imm32(value: int) -> bytes:
    return (value & 0xFFFFFFFF).to_bytes(4, "little")


def assemble_driver(ppt_cr3: int, private_stack_top: int, n_pages: int = 1) -> DriverImage:
    """Assemble the driver for a given PPT root and private stack.

    Examples
    --------
    >>> image = assemble_driver(0x123000, 0x605000)
    >>> image.code[10:13].hex(), image.code[26:29].hex()
    ('0f20d8', '0f20d8')
    >>> len(image.code_pages)
    1
    """
    code = bytearray()
    code += bytes([0x9C, 0xFA])
    code += bytes(CR3_READ) + bytes([_MODRM_EBX])
    code += b"\xb8" + _imm32(ppt_cr3)
    code += bytes(CR3_LOAD) + bytes([_MODRM_EAX])
    code += bytes([0x89, 0xE2])
    code += b"\xbc" + _imm32(private_stack_top)
    code += BODY_HOOK
    code += bytes([0x89, 0xD4])
    code += bytes([0x89, 0xD8])
    code += bytes(CR3_LOAD) + bytes([_MODRM_EAX])
    code += bytes(CR3_READ) + bytes([_MODRM_EAX])
    code += b"\x3d" + _imm32(ppt_cr3)
    code += bytes([0x75, len(VMCALL)])
    code += VMCALL
    code += bytes([0x9D, 0xC3])
    if len(code) != RET_OFFSET + 1:
        raise RuntimeError(f"Driver assembled to {len(code)} bytes, expected {RET_OFFSET + 1}")
    if n_pages < 1:
        raise ValueError(f"n_pages must be at least 1, got {n_pages}")
    code += bytes([PADDING]) * (n_pages * PAGE_SIZE - len(code))
    return DriverImage(bytes(code), ppt_cr3, private_stack_top)
