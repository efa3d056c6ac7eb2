from collections import OrderedDict
from typing import List

import numpy as np
import pandas as pd
from tqdm import tqdm

from fastio.types import PAGE_SIZE, PageData
from fastio.utils.core import as_page_array, split_pages

from .predicate import DEFAULT_PREDICATE, OpcodePredicate, SequenceHit


def _match_offsets(arr: np.ndarray, predicate: OpcodePredicate) -> np.ndarray:
    """Vectorized predicate matcher over a uint8 array; returns match offsets."""
    n = arr.shape[0] - predicate.length + 1
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    hits = np.ones(n, dtype=bool)
    for i, b in enumerate(predicate.prefix):
        hits &= arr[i : i + n] == b
    k = len(predicate.prefix)
    hits &= (arr[k : k + n] & predicate.mask) == predicate.value
    return np.flatnonzero(hits)


def naive_scan(data: PageData, predicate: OpcodePredicate = DEFAULT_PREDICATE) -> List[int]:
    """Brute-force byte-by-byte matcher, the reference oracle for the scanner.

    Parameters
    ----------
    data
        Bytes to scan
    predicate
        Predicate to match

    Returns
    -------
    List[int]
        Every offset at which a match starts
    """
    data = bytes(data)
    k = len(predicate.prefix)
    offsets = []
    for i in range(len(data) - predicate.length + 1):
        ok = True
        for j in range(k):
            if data[i + j] != predicate.prefix[j]:
                ok = False
                break
        if ok and (data[i + k] & predicate.mask) == predicate.value:
            offsets.append(i)
    return offsets


def scan_page(
    page: PageData, predicate: OpcodePredicate = DEFAULT_PREDICATE, page_index: int = 0
) -> List[SequenceHit]:
    """Find every predicate match fully contained in one page.

    Every offset is checked independently of instruction boundaries, so
    overlapping matches and matches hidden inside immediates are all reported.

    Parameters
    ----------
    page
        Exactly 4096 bytes of page content
    predicate
        Predicate to match
    page_index
        Guest-physical page number recorded in the hits

    Returns
    -------
    List[SequenceHit]
        Hits in increasing offset order; empty if the page is clean

    Examples
    --------
    >>> page = bytearray(4096)
    >>> page[100:103] = b"\\x0f\\x20\\x18"
    >>> [h.offset for h in scan_page(page)]
    [100]
    """
    arr = as_page_array(page)
    return [
        SequenceHit(
            page_index=page_index,
            offset=int(o),
            matched_bytes=arr[o : o + predicate.length].tobytes(),
            straddles_boundary=False,
        )
        for o in _match_offsets(arr, predicate)
    ]


def scan_pair(
    predecessor: PageData,
    successor: PageData,
    predicate: OpcodePredicate = DEFAULT_PREDICATE,
    page_index: int = 0,
) -> List[SequenceHit]:
    """Find matches that straddle the boundary between two adjacent pages.

    Hits lying entirely inside either page are left to :func:`scan_page`.

    Parameters
    ----------
    predecessor
        Content of the lower page (4096 bytes)
    successor
        Content of the virtually-following page (4096 bytes)
    predicate
        Predicate to match
    page_index
        Guest-physical page number of the predecessor, recorded in the hits

    Returns
    -------
    List[SequenceHit]
        Straddling hits with offsets relative to the predecessor page
    """
    window = np.concatenate([as_page_array(predecessor), as_page_array(successor)])
    lo = PAGE_SIZE - predicate.length + 1
    start = max(lo, 0)
    region = window[start : PAGE_SIZE + predicate.length - 1]
    return [
        SequenceHit(
            page_index=page_index,
            offset=int(start + o),
            matched_bytes=region[o : o + predicate.length].tobytes(),
            straddles_boundary=True,
        )
        for o in _match_offsets(region, predicate)
        if start + o < PAGE_SIZE
    ]


def scan_buffer(
    data: PageData,
    predicate: OpcodePredicate = DEFAULT_PREDICATE,
    progress_bar: bool = False,
) -> List[SequenceHit]:
    """Scan a byte buffer as consecutive, virtually adjacent 4096-byte pages.

    The final partial page is zero-padded. Page ``i`` is assumed adjacent to
    page ``i + 1``, so straddling matches are reported too.

    Parameters
    ----------
    data
        Raw bytes, e.g. the content of a binary file
    predicate
        Predicate to match
    progress_bar
        Display a progress bar over pages

    Returns
    -------
    List[SequenceHit]
        All hits ordered by (page_index, offset)
    """
    pages = split_pages(data)
    hits: List[SequenceHit] = []
    for i, page in enumerate(tqdm(pages, disable=not progress_bar)):
        hits.extend(scan_page(page, predicate, page_index=i))
        if i + 1 < len(pages):
            hits.extend(scan_pair(page, pages[i + 1], predicate, page_index=i))
    return hits


def hits_to_frame(hits: List[SequenceHit]) -> pd.DataFrame:
    """Tabulate hits as rows of (page_index, offset, bytes_hex, straddles).

    Parameters
    ----------
    hits
        Hits to tabulate

    Returns
    -------
    pd.DataFrame
        One row per hit, in input order
    """
    d = OrderedDict(
        [
            ("page_index", pd.Series([h.page_index for h in hits], dtype="int64")),
            ("offset", pd.Series([h.offset for h in hits], dtype="int64")),
            ("bytes_hex", pd.Series([h.matched_bytes.hex() for h in hits], dtype="object")),
            ("straddles", pd.Series([h.straddles_boundary for h in hits], dtype="bool")),
        ]
    )
    return pd.DataFrame(d)
