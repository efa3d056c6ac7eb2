import hashlib
import logging
from enum import Enum
from typing import NamedTuple, Optional, Sequence, Tuple

from fastio.scan import DEFAULT_PREDICATE, OpcodePredicate, naive_scan
from fastio.types import PageData

DEFAULT_DIGEST = "sha256"


class AttestationStatus(Enum):
    TRUSTED = "Trusted"
    REJECTED = "Rejected"


class AttestationResult(NamedTuple):
    """Outcome of driver attestation.

    Parameters
    ----------
    status
        Trusted or Rejected
    reason
        Why the driver was rejected (empty when trusted)
    digest
        Digest computed over the code pages
    predicate_sites
        Offsets (into the concatenated code) of every predicate match
    """

    status: AttestationStatus
    reason: str
    digest: str
    predicate_sites: Tuple[int, ...]

    @property
    def trusted(self) -> bool:
        return self.status is AttestationStatus.TRUSTED


def code_digest(code_pages: Sequence[PageData], algorithm: str = DEFAULT_DIGEST) -> str:
    """Hex digest of the concatenated code pages.

    ``algorithm`` is any name accepted by :func:`hashlib.new` (``sha1`` keeps
    compatibility with older certificates).

    >>> len(code_digest([b"\\x90"], "sha1"))
    40
    """
    h = hashlib.new(algorithm)
    for page in code_pages:
        h.update(bytes(page))
    return h.hexdigest()


def attest_driver(
    code_pages: Sequence[PageData],
    certificate_digest: str,
    predicate: OpcodePredicate = DEFAULT_PREDICATE,
    algorithm: str = DEFAULT_DIGEST,
    allowed_sites: Optional[Sequence[int]] = None,
) -> AttestationResult:
    """Check a fastio driver image before trusting it.

    The driver is Trusted iff the digest of its code pages equals the
    certificate and the predicate occurs only at its entry and exit cr3 loads.

    Parameters
    ----------
    code_pages
        The driver's code pages, in load order
    certificate_digest
        Expected hex digest
    predicate
        The forbidden opcode predicate
    algorithm
        Digest algorithm
    allowed_sites
        Exact offsets where the predicate may occur; if None, exactly two
        occurrences are required

    Returns
    -------
    AttestationResult
        Trusted or Rejected, with the reason
    """
    digest = code_digest(code_pages, algorithm)
    code = b"".join(bytes(p) for p in code_pages)
    sites = tuple(naive_scan(code, predicate))
    if digest != certificate_digest.lower():
        reason = f"digest mismatch: computed {digest[:16]}..., certificate {certificate_digest[:16]}..."
        logging.warning(f"Driver attestation rejected ({reason})")
        return AttestationResult(AttestationStatus.REJECTED, reason, digest, sites)
    if allowed_sites is None:
        ok = len(sites) == 2
    else:
        ok = sites == tuple(sorted(allowed_sites))
    if not ok:
        reason = f"predicate occurs at {list(sites)}, only entry and exit cr3 loads allowed"
        logging.warning(f"Driver attestation rejected ({reason})")
        return AttestationResult(AttestationStatus.REJECTED, reason, digest, sites)
    logging.info(f"Driver attested ({algorithm} {digest[:16]}...)")
    return AttestationResult(AttestationStatus.TRUSTED, "", digest, sites)
