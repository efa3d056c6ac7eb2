from typing import List, Sequence, Tuple

import numpy as np

from fastio.scan import DEFAULT_PREDICATE, OpcodePredicate
from fastio.types import PAGE_SIZE

HOST_DESTINATION = 0xFFFF


def _instruction(rng: np.random.RandomState) -> bytes:
    """One random instruction from a small, fully decodable menu."""
    kind = rng.randint(8)
    imm = bytes(rng.randint(0, 256, size=4).astype(np.uint8))
    if kind == 0:
        return b"\x90"
    if kind == 1:
        return bytes([0xB8 + rng.randint(8)]) + imm
    if kind == 2:
        return bytes([0x89, 0xC0 | rng.randint(64)])
    if kind == 3:
        return b"\x05" + imm
    if kind == 4:
        return b"\x3d" + imm
    if kind == 5:
        return bytes([0x50 + rng.randint(8), 0x58 + rng.randint(8)])
    if kind == 6:
        return bytes([0xEB, rng.randint(256)])
    return b"\x9c\x9d"


def _planted(rng: np.random.RandomState, predicate: OpcodePredicate) -> Tuple[bytes, int]:
    """A predicate match, either as its own instruction or hidden in an immediate.

    Returns the bytes and the offset of the match inside them.
    """
    if rng.rand() < 0.5:
        return predicate.example(0xC0 | rng.randint(8)), 0
    sequence = predicate.example(rng.randint(8))
    pad = 4 - len(sequence)
    return bytes([0xB8 + rng.randint(8)]) + sequence + bytes(max(pad, 0)), 1


def generate_code_page(
    rng: np.random.RandomState,
    n_plants: int = 0,
    predicate: OpcodePredicate = DEFAULT_PREDICATE,
) -> Tuple[bytes, List[int]]:
    """Generate a page of decodable toy code starting with an instruction at offset 0.

    Parameters
    ----------
    rng
        Random state
    n_plants
        Number of predicate matches to plant (real instructions or hidden
        inside ``mov r32, imm32`` immediates)
    predicate
        Predicate whose matches are planted

    Returns
    -------
    Tuple[bytes, List[int]]
        The 4096-byte page and the offsets of the planted matches (random
        immediates may add unplanned ones)
    """
    code = bytearray()
    planted = []
    plant_at = set(rng.choice(np.arange(512), size=min(n_plants, 512), replace=False).tolist())
    slot = 0
    while len(code) < PAGE_SIZE - 16:
        if slot in plant_at:
            chunk, offset = _planted(rng, predicate)
            planted.append(len(code) + offset)
        else:
            chunk = _instruction(rng)
        code += chunk
        slot += 1
    code += b"\x90" * (PAGE_SIZE - len(code))
    return bytes(code), planted


def generate_straddle_pair(
    rng: np.random.RandomState,
    split: int = 1,
    predicate: OpcodePredicate = DEFAULT_PREDICATE,
) -> Tuple[bytes, bytes]:
    """Two code pages whose boundary splits a predicate match.

    The first ``split`` bytes of the match end the predecessor; the rest
    start the successor. Neither page contains the match on its own.
    """
    sequence = predicate.example(rng.randint(8))
    if not 0 < split < len(sequence):
        raise ValueError(f"split must be in (0, {len(sequence)}), got {split}")
    predecessor = bytearray(b"\x90" * PAGE_SIZE)
    predecessor[PAGE_SIZE - split :] = sequence[:split]
    successor = bytearray(b"\x90" * PAGE_SIZE)
    successor[: len(sequence) - split] = sequence[split:]
    return bytes(predecessor), bytes(successor)


def generate_random_bytes(rng: np.random.RandomState, n: int) -> bytes:
    """Uniform random bytes (for adversarial scanner inputs)."""
    return bytes(rng.randint(0, 256, size=n).astype(np.uint8))


def generate_packets(
    rng: np.random.RandomState, n: int, size: int, destinations: Sequence[int]
) -> np.ndarray:
    """Generate ``n`` packets of ``size`` bytes addressed to random destinations.

    The first two bytes of each packet hold the destination agent id
    (little-endian; 0xffff addresses the host); the rest is random payload.

    Returns
    -------
    np.ndarray
        A ``(n, size)`` uint8 array
    """
    if size < 2:
        raise ValueError(f"Packets need at least a 2-byte header, got size={size}")
    packets = rng.randint(0, 256, size=(n, size)).astype(np.uint8)
    dest = np.asarray(destinations, dtype=np.int64)[rng.randint(len(destinations), size=n)]
    packets[:, 0] = dest & 0xFF
    packets[:, 1] = (dest >> 8) & 0xFF
    return packets


def packet_destination(packet: np.ndarray) -> int:
    """Destination agent id stored in a packet header."""
    return int(packet[0]) | (int(packet[1]) << 8)
