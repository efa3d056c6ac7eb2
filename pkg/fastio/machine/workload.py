"""Guest user code and the builtin overhead workloads."""
from typing import Callable, Dict, List

from fastio.types import PAGE_SIZE

USER_CODE_VA = 0x08000000

CLEAN = "clean"
PLANTED = "planted"
STRADDLE = "straddle"
CODE_KINDS = (CLEAN, PLANTED, STRADDLE)

NOP = 0x90
# mov eax, 0x0018200f: a cr3-load pattern hidden inside an immediate
HIDDEN_LOAD = bytes([0xB8, 0x0F, 0x20, 0x18, 0x00])


def _jmp(from_offset: int, to_offset: int) -> bytes:
    """``jmp rel32`` placed at ``from_offset`` reaching ``to_offset`` (same virtual frame)."""
    rel = to_offset - (from_offset + 5)
    return b"\xe9" + rel.to_bytes(4, "little", signed=True)


def user_code(kind: str, n_pages: int = 1) -> List[bytes]:
    """Code pages for a guest process, mapped contiguously from :data:`USER_CODE_VA`.

    Every page does a little register work and jumps to the next page; the last
    page jumps back to the first, so the code runs forever.

    Parameters
    ----------
    kind
        ``clean`` (no predicate match), ``planted`` (a match hidden in a
        ``mov eax, imm32`` on every page) or ``straddle`` (two pages whose
        boundary splits a hidden match)
    n_pages
        Number of pages (``straddle`` always uses two)

    Examples
    --------
    >>> pages = user_code("straddle")
    >>> pages[0][-3:].hex(), pages[1][:2].hex()
    ('b80f20', '1800')
    """
    if kind not in CODE_KINDS:
        raise ValueError(f"Unknown code kind {kind!r}, expected one of {CODE_KINDS}")
    if n_pages < 1:
        raise ValueError(f"n_pages must be at least 1, got {n_pages}")
    if kind == STRADDLE:
        first = bytearray([NOP]) * PAGE_SIZE
        tail = PAGE_SIZE - 3
        first[0:5] = _jmp(0, tail)
        first[tail:] = HIDDEN_LOAD[:3]
        second = bytearray([NOP]) * PAGE_SIZE
        second[0:2] = HIDDEN_LOAD[3:]
        second[2:7] = _jmp(PAGE_SIZE + 2, 0)
        return [bytes(first), bytes(second)]
    pages = []
    for i in range(n_pages):
        page = bytearray([NOP]) * PAGE_SIZE
        body = b"\xb9" + i.to_bytes(4, "little") + b"\x05\x01\x00\x00\x00"
        if kind == PLANTED:
            body += HIDDEN_LOAD
        page[: len(body)] = body
        start = i * PAGE_SIZE
        target = 0 if i == n_pages - 1 else start + PAGE_SIZE
        page[len(body) : len(body) + 5] = _jmp(start + len(body), target)
        pages.append(bytes(page))
    return pages


def cpu_bound(iterations: int = 50, seed: int = 0) -> str:
    """Steady code with rare page-table edits and context switches."""
    lines = [
        f"seed {seed}",
        "guests 1",
        "process init pages=2 code=planted",
        "process worker pages=2 code=clean",
        "boot init",
        "fastio",
    ]
    for i in range(iterations):
        lines.append("exec init steps=200")
        lines.append("exec worker steps=200")
        lines.append("fastio")
        if i % 10 == 9:
            lines.append("map worker 2" if (i // 10) % 2 == 0 else "unmap worker 2")
    return "\n".join(lines) + "\n"


def forkwait(iterations: int = 50, seed: int = 0) -> str:
    """Fork a child, run it briefly, wait for it to exit; repeat."""
    lines = [
        f"seed {seed}",
        "guests 1",
        "process shell pages=2 code=clean",
        "boot shell",
        "fastio",
    ]
    for i in range(iterations):
        child = f"child{i}"
        lines.append(f"fork shell {child}")
        lines.append(f"exec {child} steps=50")
        lines.append("switch shell")
        lines.append(f"exit {child}")
    return "\n".join(lines) + "\n"


BUILTIN_WORKLOADS: Dict[str, Callable[..., str]] = {
    "cpu-bound": cpu_bound,
    "forkwait": forkwait,
}


def builtin_workload(name: str, iterations: int = 50, seed: int = 0) -> str:
    """Scenario text of a builtin workload.

    Raises
    ------
    ValueError
        If no builtin has that name
    """
    try:
        make = BUILTIN_WORKLOADS[name]
    except KeyError:
        raise ValueError(f"Unknown builtin workload {name!r}, expected one of {sorted(BUILTIN_WORKLOADS)}") from None
    return make(iterations=iterations, seed=seed)
