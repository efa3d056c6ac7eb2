from typing import NamedTuple, Tuple

from fastio.types import Config, PageData


class OpcodePredicate(Config):
    """The forbidden opcode sequence: exact prefix bytes plus one masked byte.

    A byte string ``b0..bn`` matches iff the first bytes equal ``prefix`` and
    ``b[len(prefix)] & mask == value``. The default describes the cr3-load
    encoding ``0x0f 0x20`` followed by a ModRM byte whose reg field selects cr3
    (``modrm & 0x38 == 0x18``), i.e. a "2.5-byte" sequence.

    Parameters
    ----------
    prefix
        Exact leading byte values
    mask
        Mask applied to the byte following the prefix
    value
        Value the masked byte must equal

    Examples
    --------
    >>> predicate = OpcodePredicate()
    >>> predicate.length
    3
    >>> predicate.matches(bytes([0x0F, 0x20, 0xD8]))
    True
    >>> predicate.matches(bytes([0x0F, 0x20, 0xC0]))
    False
    """

    prefix: Tuple[int, ...] = (0x0F, 0x20)
    mask: int = 0x38
    value: int = 0x18

    @property
    def length(self) -> int:
        """Number of bytes a match spans."""
        return len(self.prefix) + 1

    def matches(self, data: PageData) -> bool:
        """Check whether ``data`` starts with a match."""
        data = bytes(data)
        if len(data) < self.length:
            return False
        n = len(self.prefix)
        return (
            tuple(data[:n]) == tuple(self.prefix)
            and (data[n] & self.mask) == self.value
        )

    def validate(self) -> "OpcodePredicate":
        """Check that the predicate is well formed.

        Raises
        ------
        ValueError
            If the prefix is empty, a byte is out of range, or ``value`` has bits
            outside ``mask`` (such a predicate could never match)
        """
        if not self.prefix:
            raise ValueError("OpcodePredicate prefix must not be empty")
        for b in (*self.prefix, self.mask, self.value):
            if not 0 <= b <= 0xFF:
                raise ValueError(f"OpcodePredicate byte out of range: {b:#x}")
        if self.value & ~self.mask & 0xFF:
            raise ValueError(
                f"OpcodePredicate value {self.value:#04x} has bits outside "
                f"mask {self.mask:#04x}"
            )
        return self

    def example(self, modrm_low: int = 0) -> bytes:
        """Build a matching byte string, filling non-masked bits from ``modrm_low``."""
        last = self.value | (modrm_low & ~self.mask & 0xFF)
        return bytes((*self.prefix, last))


DEFAULT_PREDICATE = OpcodePredicate()


class SequenceHit(NamedTuple):
    """A located predicate match.

    Parameters
    ----------
    page_index
        Guest-physical page number holding the first matched byte
    offset
        Offset of the first matched byte within that page
    matched_bytes
        The matched byte values
    straddles_boundary
        Whether the match extends into the virtually-following page
    """

    page_index: int
    offset: int
    matched_bytes: bytes
    straddles_boundary: bool

    @property
    def end(self) -> int:
        """Offset one past the last matched byte (may exceed the page size)."""
        return self.offset + len(self.matched_bytes)

    def offsets(self) -> Tuple[int, ...]:
        """All byte offsets covered by the match, relative to ``page_index``."""
        return tuple(range(self.offset, self.end))
