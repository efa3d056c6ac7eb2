"""Multi-agent switching benchmark over the shared software ring, with a modeled time base."""
import itertools
import logging
import time
from collections import OrderedDict
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from fastio.layout import PptLayout, SlabRegistry
from fastio.synthetic import generate_packets
from fastio.types import PAGE_SIZE, Config
from fastio.utils import Logger, derive_seed

from .switch import COPY_ALWAYS, RX_MODES, ZERO_COPY, FastioSwitch

# tx/rx agent counts of the standard configurations
BENCH_GRID: Dict[str, Tuple[int, int]] = OrderedDict(
    [("tx1-rx1", (1, 1)), ("tx1-rx3", (1, 3)), ("tx3-rx1", (3, 1)), ("tx2-rx2", (2, 2))]
)
PACKET_SIZES = (60, 1500)
MIN_PACKET = 60
MAX_PACKET = 1500

# guest-physical pages handed to bench agents start here, one window per agent
_AGENT_GPA_BASE = 0x20000
_AGENT_GPA_STRIDE = 0x1000


class BenchConfig(Config):
    """Settings for one benchmark run.

    The time base is modeled: each run is charged a fixed cost per packet
    handled, per payload copy (plus a per-byte part), per drop and per lock
    acquisition, so the same config and seed always give the same report.

    Parameters
    ----------
    n_tx
        Transmitting agents
    n_rx
        Receiving agents
    pkt_size
        Packet size in bytes (60 to 1500)
    packets
        Total packets offered, split evenly across transmitters
    mode
        Receive mode, ``zc`` or ``no-rzc``
    seed
        Seed for packet payloads and destinations
    tx_batch
        Packets a transmitter queues per fastio call
    consume_batch
        Hardware ring entries one rxsync consumes at most
    app_batch
        Packets all receiving applications together read per round
    hw_ring_slots
        Slots of the shared software ring
    ring_slots
        Slots of each agent's netmap rings
    buffer_size
        Bytes per packet buffer
    max_rounds
        Rounds before the run is declared stuck
    packet_ns
        Modeled cost of handling one packet on either path
    copy_ns
        Modeled fixed cost of one payload copy
    copy_byte_ns
        Modeled cost per copied byte
    drop_ns
        Modeled cost of one drop
    lock_ns
        Modeled cost of one lock acquisition
    log_freq
        Rounds between progress log lines (0 disables)
    """

    n_tx: int = 1
    n_rx: int = 1
    pkt_size: int = 60
    packets: int = 20000
    mode: str = ZERO_COPY
    seed: int = 0
    tx_batch: int = 256
    consume_batch: int = 256
    app_batch: int = 128
    hw_ring_slots: int = 512
    ring_slots: int = 2048
    buffer_size: int = 2048
    max_rounds: int = 100000
    packet_ns: float = 20.0
    copy_ns: float = 10.0
    copy_byte_ns: float = 0.05
    drop_ns: float = 5.0
    lock_ns: float = 40.0
    log_freq: int = 0


class BenchResult(NamedTuple):
    config: BenchConfig
    agents: pd.DataFrame
    summary: Dict[str, Any]


def validate_config(config: BenchConfig) -> BenchConfig:
    """Raise ValueError for an impossible role assignment or size."""
    if config.n_tx < 1 or config.n_rx < 1:
        raise ValueError(f"Need at least one transmitter and one receiver, got tx={config.n_tx} rx={config.n_rx}")
    if not MIN_PACKET <= config.pkt_size <= MAX_PACKET:
        raise ValueError(f"pkt_size must be in [{MIN_PACKET}, {MAX_PACKET}], got {config.pkt_size}")
    if config.pkt_size > config.buffer_size:
        raise ValueError(f"pkt_size {config.pkt_size} exceeds buffer_size {config.buffer_size}")
    if config.mode not in RX_MODES:
        raise ValueError(f"mode must be one of {RX_MODES}, got {config.mode!r}")
    if config.packets < config.n_tx:
        raise ValueError(f"packets={config.packets} leaves a transmitter with nothing to send")
    if min(config.tx_batch, config.consume_batch, config.app_batch) < 1:
        raise ValueError("Batch sizes must be positive")
    return config


def grid_config(name: str, **kwargs: Any) -> BenchConfig:
    """Config of a named grid entry (``tx1-rx1``, ...)."""
    try:
        n_tx, n_rx = BENCH_GRID[name]
    except KeyError:
        raise ValueError(f"Unknown bench configuration {name!r}, expected one of {list(BENCH_GRID)}") from None
    return BenchConfig(n_tx=n_tx, n_rx=n_rx, **kwargs)  # type: ignore


def build_switch(config: BenchConfig, layout: PptLayout = PptLayout()) -> Tuple[FastioSwitch, List[int], List[int]]:
    """A switch with ``n_tx + n_rx`` attested, registered and attached agents.

    Returns
    -------
    Tuple[FastioSwitch, List[int], List[int]]
        The switch, transmitter ids and receiver ids
    """
    n_agents = config.n_tx + config.n_rx
    if n_agents >= layout.max_guests:
        raise ValueError(f"{n_agents} agents exceed the layout's {layout.max_guests - 1} guest slabs")
    registry = SlabRegistry(layout, buffer_size=config.buffer_size)
    switch = FastioSwitch(
        registry,
        hw_ring_slots=config.hw_ring_slots,
        buffer_size=config.buffer_size,
        ring_slots=config.ring_slots,
        rx_mode=config.mode,
        consume_batch=config.consume_batch,
    )
    ring_pages = 2
    buffer_pages = -(-switch.pool_size * config.buffer_size // PAGE_SIZE)
    for agent_id in range(1, n_agents + 1):
        base = _AGENT_GPA_BASE + agent_id * _AGENT_GPA_STRIDE
        registry.mark_attested(agent_id)
        registry.register_guest_rings(
            agent_id, range(base, base + ring_pages + buffer_pages), ring_pages, config.buffer_size
        )
        switch.add_agent(agent_id)
    transmitters = list(range(1, config.n_tx + 1))
    receivers = list(range(config.n_tx + 1, n_agents + 1))
    return switch, transmitters, receivers


def _rotate(ids: Sequence[int], r: int) -> List[int]:
    k = r % len(ids)
    return list(ids[k:]) + list(ids[:k])


def run_bench(config: BenchConfig, progress_bar: bool = False, wall_clock: bool = False) -> BenchResult:
    """Drive every agent's fastio-call loop against the shared software ring.

    Each round every transmitter queues up to ``tx_batch`` packets and makes
    one fastio call (txsync), then every receiver makes one fastio call
    (rxsync) and its application reads its share of ``app_batch`` packets.
    The starting agent rotates from round to round. The run ends once every
    offered packet has been delivered or dropped.

    Raises
    ------
    ValueError
        For an invalid config
    RuntimeError
        If the run makes no progress within ``max_rounds``
    """
    validate_config(config)
    switch, transmitters, receivers = build_switch(config)
    share, extra = divmod(config.packets, config.n_tx)
    budgets = {t: share + (1 if i < extra else 0) for i, t in enumerate(transmitters)}
    rngs = {t: np.random.RandomState(derive_seed(config.seed, "tx", t)) for t in transmitters}
    backlog: Dict[int, np.ndarray] = {t: np.zeros((0, config.pkt_size), dtype=np.uint8) for t in transmitters}
    app_share = max(1, config.app_batch // config.n_rx)
    logger = Logger(config.log_freq, unit="rounds") if config.log_freq > 0 else None
    started = time.perf_counter()
    rounds = 0
    bar = tqdm(total=config.packets, disable=not progress_bar)

    def done() -> bool:
        return (
            all(budgets[t] == 0 and len(backlog[t]) == 0 and switch.agents[t].tx.is_empty() for t in transmitters)
            and switch.in_flight() == 0
        )

    while not done():
        if rounds >= config.max_rounds:
            raise RuntimeError(f"Bench made no progress within {config.max_rounds} rounds")
        for t in _rotate(transmitters, rounds):
            want = min(config.tx_batch, budgets[t]) - len(backlog[t])
            if want > 0:
                fresh = generate_packets(rngs[t], want, config.pkt_size, receivers)
                backlog[t] = np.concatenate([backlog[t], fresh])
                budgets[t] -= want
            queued = switch.submit(t, backlog[t])
            backlog[t] = backlog[t][queued:]
            bar.update(queued)
            switch.txsync(t)
        for r in _rotate(receivers, rounds):
            switch.rxsync(r)
            switch.discard(r, app_share)
        rounds += 1
        if logger is not None and logger.check():
            t_ = switch.totals()
            logger.log(
                {
                    "bench/transmitted": t_["transmitted"],
                    "bench/delivered": t_["delivered"],
                    "bench/dropped": t_["dropped"],
                    "bench/in_flight": switch.in_flight(),
                }
            )
    bar.close()
    wall = time.perf_counter() - started
    for r in receivers:
        switch.discard(r)
    if not switch.conserved():
        raise RuntimeError(f"Switch accounting does not balance: {switch.totals()}")
    return _report(config, switch, transmitters, receivers, rounds, wall if wall_clock else None)


def modeled_seconds(config: BenchConfig, totals: Dict[str, int], lock_acquisitions: int) -> float:
    """Modeled run time from the operation counts."""
    handled = totals["transmitted"] + totals["delivered"] + totals["dropped"]
    copy_cost = config.copy_ns + config.copy_byte_ns * config.pkt_size
    ns = (
        handled * config.packet_ns
        + totals["copies"] * copy_cost
        + totals["dropped"] * config.drop_ns
        + lock_acquisitions * config.lock_ns
    )
    return ns * 1e-9


def _report(
    config: BenchConfig,
    switch: FastioSwitch,
    transmitters: List[int],
    receivers: List[int],
    rounds: int,
    wall: Optional[float],
) -> BenchResult:
    totals = switch.totals()
    seconds = modeled_seconds(config, totals, switch.lock_acquisitions)
    frame = switch.stats_frame()
    roles = {t: "tx" for t in transmitters}
    roles.update({r: "rx" for r in receivers})
    frame.insert(1, "role", pd.Series([roles.get(a, "") for a in frame["agent_id"]], dtype="object"))
    frame["pps"] = (frame["delivered"] / seconds).astype("float64")
    delivered = max(totals["delivered"], 1)
    shares = np.array([switch.stats[t]["tx_delivered"] / delivered for t in transmitters], dtype=float)
    consumed = totals["delivered"] + totals["dropped"]
    summary: Dict[str, Any] = OrderedDict()
    summary["config"] = f"tx{config.n_tx}-rx{config.n_rx}"
    summary["mode"] = config.mode
    summary["pkt_size"] = config.pkt_size
    summary["packets"] = config.packets
    summary["seed"] = config.seed
    summary["rounds"] = rounds
    summary["lock_acquisitions"] = switch.lock_acquisitions
    for field, value in totals.items():
        summary[field] = value
    summary["drop_rate"] = totals["dropped"] / consumed if consumed else 0.0
    summary["modeled_seconds"] = seconds
    summary["aggregate_mpps"] = totals["delivered"] / seconds / 1e6 if seconds else 0.0
    summary["fairness"] = float(shares.max() / shares.min()) if shares.min() > 0 else float("inf")
    summary["tx_shares"] = [float(s) for s in shares]
    summary.update(switch.meter.to_dict())
    if wall is not None:
        summary["wall_seconds"] = wall
    logging.info(
        f"Bench {summary['config']} {config.mode} {config.pkt_size}B: "
        f"{summary['aggregate_mpps']:.2f} Mpps modeled, drop rate {summary['drop_rate']:.3f}"
    )
    return BenchResult(config, frame, dict(summary))


def run_grid(
    base: BenchConfig = BenchConfig(),
    names: Sequence[str] = tuple(BENCH_GRID),
    modes: Sequence[str] = (ZERO_COPY, COPY_ALWAYS),
    pkt_sizes: Sequence[int] = PACKET_SIZES,
    progress_bar: bool = False,
) -> pd.DataFrame:
    """Run the grid of configurations x modes x packet sizes; one summary row each."""
    rows = []
    cells = list(itertools.product(names, modes, pkt_sizes))
    for name, mode, size in tqdm(cells, disable=not progress_bar):
        n_tx, n_rx = grid_config(name)[:2]
        config = base._replace(n_tx=n_tx, n_rx=n_rx, mode=mode, pkt_size=size)
        rows.append(run_bench(config).summary)
    columns = [
        "config",
        "mode",
        "pkt_size",
        "aggregate_mpps",
        "drop_rate",
        "delivered",
        "dropped",
        "copies",
        "matches",
        "mismatches",
        "fairness",
        "lock_acquisitions",
    ]
    d: Dict[str, pd.Series] = OrderedDict()
    for col in columns:
        d[col] = pd.Series([row[col] for row in rows])
    return pd.DataFrame(d)
