import hashlib
from typing import List

import numpy as np

from fastio.types import PAGE_SIZE, PageData


def _hash(*parts: object) -> int:
    """Deterministic hash function."""
    byte_string = "/".join(str(p) for p in parts).encode("utf-8")
    return int(hashlib.sha1(byte_string).hexdigest(), 16)


def derive_seed(seed: int, *labels: object) -> int:
    """Derive an independent 32-bit sub-seed from a run seed and labels.

    Used so that each simulated component (agent, guest, fuzz stream) draws from
    its own random stream while the whole run stays reproducible from one seed.

    >>> derive_seed(7, "agent", 1) == derive_seed(7, "agent", 1)
    True
    >>> derive_seed(7, "agent", 1) == derive_seed(7, "agent", 2)
    False
    """
    return _hash(seed, *labels) % (2 ** 32)


def split_pages(data: PageData) -> List[bytes]:
    """Split a byte string into consecutive 4096-byte pages.

    The final partial page is zero-padded. An empty input yields no pages.

    >>> [len(p) for p in split_pages(b"\\x90" * 5000)]
    [4096, 4096]
    """
    data = bytes(data)
    pages = []
    for start in range(0, len(data), PAGE_SIZE):
        page = data[start : start + PAGE_SIZE]
        if len(page) < PAGE_SIZE:
            page = page + bytes(PAGE_SIZE - len(page))
        pages.append(page)
    return pages


def as_page_array(page: PageData) -> np.ndarray:
    """View page content as a uint8 array, checking the page size.

    Raises
    ------
    ValueError
        If the page is not exactly 4096 bytes
    """
    arr = np.frombuffer(bytes(page), dtype=np.uint8)
    if arr.shape[0] != PAGE_SIZE:
        raise ValueError(f"Page must be exactly {PAGE_SIZE} bytes, got {arr.shape[0]}")
    return arr
