import logging
from typing import List

import numpy as np

HOST_ID = 0


class GuestIdBitmap:
    """Bitmap allocator for fastio ids; id 0 is the host and is always taken.

    Parameters
    ----------
    max_ids
        Number of ids, host included (ids ``0 .. max_ids - 1``)

    Examples
    --------
    >>> ids = GuestIdBitmap(8)
    >>> ids.allocate(), ids.allocate(), ids.allocate()
    (1, 2, 3)
    >>> ids.free(2)
    >>> ids.allocate()
    2
    """

    def __init__(self, max_ids: int) -> None:
        if max_ids < 1:
            raise ValueError(f"max_ids must be at least 1, got {max_ids}")
        self._bits = np.zeros(max_ids, dtype=bool)
        self._bits[HOST_ID] = True

    @property
    def max_ids(self) -> int:
        return int(self._bits.shape[0])

    def allocate(self) -> int:
        """Return the lowest free id (never 0).

        Raises
        ------
        RuntimeError
            If every id is live
        """
        free = np.flatnonzero(~self._bits)
        if free.size == 0:
            raise RuntimeError(f"All {self.max_ids} fastio ids are in use")
        guest_id = int(free[0])
        self._bits[guest_id] = True
        logging.debug(f"Allocated fastio id {guest_id}")
        return guest_id

    def free(self, guest_id: int) -> None:
        """Release an allocated guest id.

        Raises
        ------
        ValueError
            If the id is the host's, out of range, or not allocated
        """
        if guest_id == HOST_ID:
            raise ValueError("The host id 0 cannot be freed")
        if not 0 < guest_id < self.max_ids:
            raise ValueError(f"Guest id {guest_id} out of range [1, {self.max_ids})")
        if not self._bits[guest_id]:
            raise ValueError(f"Guest id {guest_id} is not allocated")
        self._bits[guest_id] = False

    def is_live(self, guest_id: int) -> bool:
        return 0 <= guest_id < self.max_ids and bool(self._bits[guest_id])

    def live_ids(self) -> List[int]:
        """All live ids in increasing order, host included."""
        return [int(i) for i in np.flatnonzero(self._bits)]

    def __len__(self) -> int:
        return int(self._bits.sum())
