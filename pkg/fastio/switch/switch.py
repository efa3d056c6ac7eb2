"""The in-guest software switch run by the fastio driver body."""
import logging
import threading
from collections import Counter, OrderedDict
from contextlib import contextmanager
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Set, Tuple

import numpy as np
import pandas as pd

from fastio.layout import HOST_ID, SlabRegistry
from fastio.synthetic import HOST_DESTINATION, packet_destination
from fastio.types import Config

from .buffers import BufferPool, CopyMeter
from .ring import Direction, NetmapRing, RingSlot

ZERO_COPY = "zc"
COPY_ALWAYS = "no-rzc"
RX_MODES = (ZERO_COPY, COPY_ALWAYS)

# owner id of the buffers private to the hardware ring
HW_OWNER = -1

# where each agent's buffers appear in its own address space
GUEST_BUFFER_VA = 0x10000000

STAT_FIELDS = (
    "fastio_calls",
    "transmitted",
    "tx_delivered",
    "violations",
    "unroutable",
    "delivered",
    "dropped",
    "copies",
    "matches",
    "mismatches",
)


class SwitchConfig(Config):
    """Settings for :class:`FastioSwitch`.

    Parameters
    ----------
    hw_ring_slots
        Slots of the shared hardware (or software) ring
    buffer_size
        Bytes per packet buffer
    ring_slots
        Slots of each agent's netmap tx and rx rings
    rx_mode
        ``zc`` (receive zero-copy) or ``no-rzc`` (always copy on receive)
    consume_batch
        Hardware ring entries one rxsync consumes at most
    """

    hw_ring_slots: int = 512
    buffer_size: int = 2048
    ring_slots: int = 2048
    rx_mode: str = ZERO_COPY
    consume_batch: int = 256


class HwEntry(NamedTuple):
    """A buffer on the hardware ring, named by its host-physical address.

    Parameters
    ----------
    hpa
        Host-physical byte address of the buffer
    owner_id
        Agent owning the buffer
    buffer_index
        Index in the owner's pool
    length
        Packet length (0 for an empty posted buffer)
    source_id
        Transmitting agent (-1 for an empty posted buffer)
    """

    hpa: int
    owner_id: int
    buffer_index: int
    length: int = 0
    source_id: int = -1


class SyncResult(NamedTuple):
    """What one txsync/rxsync did."""

    agent_id: int
    enqueued: int = 0
    violations: int = 0
    posted: int = 0
    delivered: int = 0
    dropped: int = 0
    unroutable: int = 0
    copies: int = 0
    matches: int = 0
    mismatches: int = 0

    def __add__(self, other: "SyncResult") -> "SyncResult":  # type: ignore
        return SyncResult(self.agent_id, *(a + b for a, b in zip(self[1:], other[1:])))


class SwitchAgent:
    """The switch's view of one agent: its rings and its buffer pool."""

    def __init__(self, agent_id: int, config: SwitchConfig, ppt_addresses: np.ndarray, meter: CopyMeter) -> None:
        self.agent_id = agent_id
        self.tx = NetmapRing[RingSlot](config.ring_slots, agent_id, Direction.TX)
        self.rx = NetmapRing[RingSlot](config.ring_slots, agent_id, Direction.RX)
        self.pool = BufferPool(agent_id, len(ppt_addresses), config.buffer_size, meter)
        self.ppt_addresses = ppt_addresses
        self.buffer_size = config.buffer_size
        # buffers currently referenced by the agent's rx ring
        self.rx_held: Set[int] = set()

    def slot(self, index: int, length: int) -> RingSlot:
        return RingSlot(
            index, length, GUEST_BUFFER_VA + index * self.buffer_size, int(self.ppt_addresses[index])
        )


class FastioSwitch:
    """Netmap rings per agent switched through one shared hardware ring.

    Transmit is zero-copy: txsync validates each slot's PPT pointer against
    the sender's slab, turns it into a host-physical address through the
    registry's hash table and places that address on the hardware ring. The
    device then moves the payload into a posted receive buffer. On receive,
    a packet whose destination owns the buffer it landed in is handed over
    as is (a match); any other packet is copied into a fresh buffer of its
    destination (a mismatch). A receiver whose own ring or pool is full
    leaves its packets on the hardware ring; a packet for any other agent
    that cannot take it is dropped.

    All switch state changes under one lock, held for a whole fastio call.

    Parameters
    ----------
    registry
        Slab registrations (every agent must be registered there first)
    kwargs
        Settings merged into :class:`SwitchConfig`
    """

    def __init__(self, registry: SlabRegistry, **kwargs: object) -> None:
        self.config = SwitchConfig(**kwargs)  # type: ignore
        if self.config.rx_mode not in RX_MODES:
            raise ValueError(f"rx_mode must be one of {RX_MODES}, got {self.config.rx_mode!r}")
        if self.config.hw_ring_slots < 2 or self.config.ring_slots < 2:
            raise ValueError("Rings need at least 2 slots")
        if self.config.consume_batch < 1:
            raise ValueError(f"consume_batch must be positive, got {self.config.consume_batch}")
        self.registry = registry
        self.layout = registry.layout
        self.meter = CopyMeter()
        hw = self.config.hw_ring_slots
        self.hw_tx = NetmapRing[HwEntry](hw, HW_OWNER, Direction.TX)
        self.hw_posted = NetmapRing[HwEntry](hw, HW_OWNER, Direction.RX)
        self.hw_filled = NetmapRing[HwEntry](hw, HW_OWNER, Direction.RX)
        self.hw_pool = BufferPool(HW_OWNER, hw, self.config.buffer_size, self.meter)
        self.agents: Dict[int, SwitchAgent] = OrderedDict()
        self.stats: Dict[int, Counter] = OrderedDict()
        self.drop_eligible: Set[int] = set()
        self.lock_acquisitions = 0
        self._hpa_index: Dict[int, Tuple[int, int]] = {}
        # (owner, buffer index) of every buffer sitting on a hardware ring
        self._on_hw: Set[Tuple[int, int]] = set()
        self._lock = threading.Lock()

    @property
    def pool_size(self) -> int:
        """Buffers per agent: twice the hardware ring, keeping double buffering under zero-copy."""
        return 2 * self.config.hw_ring_slots

    # Registration

    def add_agent(self, agent_id: int) -> SwitchAgent:
        """Attach a registered agent's rings and buffers to the switch.

        Raises
        ------
        ValueError
            If the agent is already attached, has no slab registration, or
            its slab holds fewer than :attr:`pool_size` buffers of this size
        """
        if agent_id in self.agents:
            raise ValueError(f"Agent {agent_id} is already attached")
        slab = self.registry.slab(agent_id)
        if slab.buffer_size != self.config.buffer_size:
            raise ValueError(
                f"Agent {agent_id} registered {slab.buffer_size}-byte buffers, "
                f"the switch uses {self.config.buffer_size}"
            )
        if slab.n_buffers < self.pool_size:
            raise ValueError(
                f"Agent {agent_id} registered {slab.n_buffers} buffers, the switch needs {self.pool_size}"
            )
        ppt_addresses = slab.slot_ppt_addresses()[: self.pool_size]
        agent = SwitchAgent(agent_id, self.config, ppt_addresses, self.meter)
        for index, addr in enumerate(ppt_addresses):
            hpa = self.registry.translate(int(addr))
            if hpa is None:
                raise ValueError(f"Buffer {index} of agent {agent_id} has no host-physical backing")
            self._hpa_index[hpa] = (agent_id, index)
        self.agents[agent_id] = agent
        self.stats.setdefault(agent_id, Counter())
        logging.debug(f"Switch attached agent {agent_id} with {self.pool_size} buffers")
        return agent

    def agent(self, agent_id: int) -> SwitchAgent:
        try:
            return self.agents[agent_id]
        except KeyError:
            raise ValueError(f"Agent {agent_id} is not attached to the switch") from None

    def _pool(self, owner_id: int) -> BufferPool:
        return self.hw_pool if owner_id == HW_OWNER else self.agents[owner_id].pool

    def _hpa(self, owner_id: int, index: int) -> int:
        if owner_id == HW_OWNER:
            return -(index + 1)
        hpa = self.registry.translate(int(self.agents[owner_id].ppt_addresses[index]))
        return int(hpa)  # type: ignore

    # Agent side (user space, no lock)

    def submit(self, agent_id: int, packets: np.ndarray) -> int:
        """The agent's application queues packets on its tx ring.

        Stops early when the agent runs out of free buffers or tx slots.

        Returns
        -------
        int
            Packets queued
        """
        agent = self.agent(agent_id)
        n = 0
        for packet in packets:
            if agent.tx.is_full():
                break
            index = agent.pool.alloc()
            if index is None:
                break
            agent.pool.fill(index, packet)
            agent.tx.push(agent.slot(index, len(packet)))
            n += 1
        return n

    def submit_slot(self, agent_id: int, slot: RingSlot) -> bool:
        """Queue a raw tx slot (the agent controls every field of it)."""
        return self.agent(agent_id).tx.push(slot)

    def receive(self, agent_id: int, limit: Optional[int] = None) -> List[bytes]:
        """The agent's application reads received packets and frees their buffers."""
        agent = self.agent(agent_id)
        packets = []
        for slot in agent.rx.drain(limit):
            packets.append(bytes(agent.pool.packet(slot.buffer_index)))
            agent.rx_held.discard(slot.buffer_index)
            agent.pool.free(slot.buffer_index)
        return packets

    def discard(self, agent_id: int, limit: Optional[int] = None) -> int:
        """Like :meth:`receive` without returning payloads."""
        agent = self.agent(agent_id)
        slots = agent.rx.drain(limit)
        for slot in slots:
            agent.rx_held.discard(slot.buffer_index)
            agent.pool.free(slot.buffer_index)
        return len(slots)

    # Driver side (inside the critical section)

    @contextmanager
    def critical_section(self) -> Iterator[None]:
        with self._lock:
            self.lock_acquisitions += 1
            yield

    def sync(self, agent_id: int, tx: bool = True, rx: bool = True, mode: Optional[str] = None) -> SyncResult:
        """One fastio call by ``agent_id``: txsync and/or rxsync under the switch lock."""
        self.agent(agent_id)
        mode = mode or self.config.rx_mode
        if mode not in RX_MODES:
            raise ValueError(f"rx mode must be one of {RX_MODES}, got {mode!r}")
        with self.critical_section():
            self.stats[agent_id]["fastio_calls"] += 1
            result = SyncResult(agent_id)
            if tx:
                result = result + self._txsync(agent_id)
            if rx:
                result = result + self._rxsync(agent_id, mode)
        return result

    def txsync(self, agent_id: int) -> SyncResult:
        return self.sync(agent_id, tx=True, rx=False)

    def rxsync(self, agent_id: int, mode: Optional[str] = None) -> SyncResult:
        return self.sync(agent_id, tx=False, rx=True, mode=mode)

    def _txsync(self, agent_id: int) -> SyncResult:
        agent = self.agents[agent_id]
        stats = self.stats[agent_id]
        enqueued = violations = 0
        while not agent.tx.is_empty():
            slot: RingSlot = agent.tx.peek()  # type: ignore
            hpa = None
            if self.layout.validate_ppt_address(slot.ppt_address, agent_id):
                hpa = self.registry.translate(slot.ppt_address)
            if hpa is None or self._hpa_index.get(hpa) != (agent_id, slot.buffer_index):
                agent.tx.pop()
                self._reject(agent_id, slot, "fails the slab bounds check")
                violations += 1
                continue
            if not agent.pool.in_use(slot.buffer_index) or self._held_outside_tx(agent_id, slot.buffer_index):
                agent.tx.pop()
                self._reject(agent_id, slot, "names a buffer the agent does not hold")
                violations += 1
                continue
            if self.hw_tx.is_full():
                break
            agent.tx.pop()
            self.hw_tx.push(HwEntry(hpa, agent_id, slot.buffer_index, slot.length, agent_id))
            self._on_hw.add((agent_id, slot.buffer_index))
            stats["transmitted"] += 1
            enqueued += 1
        return SyncResult(agent_id, enqueued=enqueued, violations=violations)

    def _held_outside_tx(self, agent_id: int, index: int) -> bool:
        return (agent_id, index) in self._on_hw or index in self.agents[agent_id].rx_held

    def _reject(self, agent_id: int, slot: RingSlot, why: str) -> None:
        """Count a popped tx slot as a violation and reclaim its buffer if nothing else references it."""
        agent = self.agents[agent_id]
        stats = self.stats[agent_id]
        stats["transmitted"] += 1
        stats["violations"] += 1
        index = slot.buffer_index
        if (
            0 <= index < agent.pool.n_buffers
            and agent.pool.in_use(index)
            and not self._held_outside_tx(agent_id, index)
            and all(s.buffer_index != index for s in agent.tx)
        ):
            agent.pool.free(index)
        logging.warning(f"Agent {agent_id} tx slot with PPT pointer {slot.ppt_address:#x} {why}; dropped")

    def _replenish(self, agent_id: int, mode: str) -> int:
        """Post empty buffers to the hardware ring: the caller's own (zc) or the ring's private set."""
        pool = self.agents[agent_id].pool if mode == ZERO_COPY else self.hw_pool
        owner = agent_id if mode == ZERO_COPY else HW_OWNER
        room = self.hw_posted.capacity - self.hw_posted.occupancy - self.hw_filled.occupancy
        posted = 0
        while posted < room:
            index = pool.alloc()
            if index is None:
                break
            self.hw_posted.push(HwEntry(self._hpa(owner, index), owner, index))
            self._on_hw.add((owner, index))
            posted += 1
        return posted

    def _transfer(self) -> int:
        """The device moves queued frames into posted buffers (DMA, no CPU copy)."""
        moved = 0
        while not self.hw_tx.is_empty() and not self.hw_posted.is_empty():
            frame: HwEntry = self.hw_tx.pop()  # type: ignore
            posted: HwEntry = self.hw_posted.pop()  # type: ignore
            source = self._pool(frame.owner_id)
            self._pool(posted.owner_id).dma(posted.buffer_index, source, frame.buffer_index)
            self._on_hw.discard((frame.owner_id, frame.buffer_index))
            source.free(frame.buffer_index)
            self.hw_filled.push(posted._replace(length=frame.length, source_id=frame.source_id))
            moved += 1
        return moved

    def _rxsync(self, agent_id: int, mode: str) -> SyncResult:
        posted = self._replenish(agent_id, mode)
        self._transfer()
        counts: Counter = Counter()
        consumed = 0
        while consumed < self.config.consume_batch and not self.hw_filled.is_empty():
            entry: HwEntry = self.hw_filled.peek()  # type: ignore
            if self._must_wait(agent_id, entry, mode):
                break
            self.hw_filled.pop()
            self._on_hw.discard((entry.owner_id, entry.buffer_index))
            counts.update(self._switch_packet(entry, mode))
            consumed += 1
        posted += self._replenish(agent_id, mode)
        return SyncResult(agent_id, posted=posted, **counts)

    def _destination(self, entry: HwEntry) -> int:
        dest = packet_destination(self._pool(entry.owner_id).packet(entry.buffer_index))
        return HOST_ID if dest == HOST_DESTINATION else dest

    def _must_wait(self, agent_id: int, entry: HwEntry, mode: str) -> bool:
        """Whether the caller should return to user space instead of consuming ``entry``.

        A packet for the caller itself that its rx ring or free buffers
        cannot take yet stays on the hardware ring; the caller's application
        frees room before the next call. Packets for other agents are never
        held back.
        """
        dest = self._destination(entry)
        if dest != agent_id or dest in self.drop_eligible:
            return False
        target = self.agents[dest]
        if target.rx.is_full():
            return True
        needs_copy = not (mode == ZERO_COPY and entry.owner_id == dest)
        return needs_copy and target.pool.n_free == 0

    def _switch_packet(self, entry: HwEntry, mode: str) -> Dict[str, int]:
        src_pool = self._pool(entry.owner_id)
        dest = self._destination(entry)
        if dest not in self.agents:
            src_pool.free(entry.buffer_index)
            self.stats.setdefault(entry.source_id, Counter())["unroutable"] += 1
            return {"unroutable": 1}
        target = self.agents[dest]
        stats = self.stats[dest]
        if dest in self.drop_eligible or target.rx.is_full():
            src_pool.free(entry.buffer_index)
            stats["dropped"] += 1
            return {"dropped": 1}
        if mode == ZERO_COPY and entry.owner_id == dest:
            target.rx.push(target.slot(entry.buffer_index, entry.length))
            target.rx_held.add(entry.buffer_index)
            stats["matches"] += 1
            result = {"matches": 1}
        else:
            index = target.pool.alloc()
            if index is None:
                src_pool.free(entry.buffer_index)
                stats["dropped"] += 1
                return {"dropped": 1}
            target.pool.copy_from(index, src_pool, entry.buffer_index)
            src_pool.free(entry.buffer_index)
            target.rx.push(target.slot(index, entry.length))
            target.rx_held.add(index)
            stats["copies"] += 1
            result = {"copies": 1}
            if mode == ZERO_COPY:
                stats["mismatches"] += 1
                result["mismatches"] = 1
        stats["delivered"] += 1
        self.stats.setdefault(entry.source_id, Counter())["tx_delivered"] += 1
        result["delivered"] = 1
        return result

    # Selfish-guest policing

    def set_drop_eligible(self, agent_ids: Iterable[int]) -> None:
        """Drop every packet addressed to these agents until the next call."""
        ids = set(agent_ids)
        if HOST_ID in ids:
            raise ValueError("The host is never drop-eligible")
        self.drop_eligible = ids

    def call_counts(self) -> Dict[int, int]:
        """fastio calls per attached agent so far."""
        return {a: int(self.stats[a]["fastio_calls"]) for a in self.agents}

    # Accounting

    def in_flight(self) -> int:
        """Transmitted packets not yet delivered or dropped."""
        return self.hw_tx.occupancy + self.hw_filled.occupancy

    def totals(self) -> Dict[str, int]:
        totals: Counter = Counter()
        for counter in self.stats.values():
            totals.update(counter)
        return {f: int(totals[f]) for f in STAT_FIELDS}

    def conserved(self) -> bool:
        """transmitted = delivered + dropped + violations + unroutable + in flight."""
        t = self.totals()
        accounted = t["tx_delivered"] + t["dropped"] + t["violations"] + t["unroutable"] + self.in_flight()
        return t["transmitted"] == accounted and t["tx_delivered"] == t["delivered"]

    def stats_frame(self) -> pd.DataFrame:
        """One row per agent (and per unattached transmitter id seen)."""
        ids = list(self.stats)
        d: Dict[str, pd.Series] = OrderedDict()
        d["agent_id"] = pd.Series(ids, dtype="int64")
        for field in STAT_FIELDS:
            d[field] = pd.Series([int(self.stats[a][field]) for a in ids], dtype="int64")
        return pd.DataFrame(d)
