"""Privileged address-space geometry, fastio ids, slab registration and attestation."""

from .attest import (  # noqa: F401
    DEFAULT_DIGEST,
    AttestationResult,
    AttestationStatus,
    attest_driver,
    code_digest,
)
from .core import GiB, MiB, PptLayout  # noqa: F401
from .ids import HOST_ID, GuestIdBitmap  # noqa: F401
from .registry import SlabMap, SlabRegistry, host_frame  # noqa: F401
