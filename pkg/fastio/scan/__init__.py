"""Opcode scanning, instruction-boundary recovery and int3 patch planning."""

from .core import hits_to_frame, naive_scan, scan_buffer, scan_page, scan_pair  # noqa: F401
from .decode import (  # noqa: F401
    BoundaryResult,
    Instruction,
    Known,
    Unknown,
    decode_instruction,
    decode_span,
    find_boundary,
    instruction_length,
)
from .patch import (  # noqa: F401
    INT3,
    EmulationSpec,
    PatchRecord,
    apply_patch,
    convert_deferred,
    exclude_offsets,
    original_code,
    plan_patch,
    revert_patch,
)
from .predicate import DEFAULT_PREDICATE, OpcodePredicate, SequenceHit  # noqa: F401
