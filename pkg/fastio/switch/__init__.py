"""Netmap rings, zero-copy switching and the multi-agent benchmark."""

from .bench import (  # noqa: F401
    BENCH_GRID,
    PACKET_SIZES,
    BenchConfig,
    BenchResult,
    build_switch,
    grid_config,
    modeled_seconds,
    run_bench,
    run_grid,
    validate_config,
)
from .buffers import BufferPool, CopyMeter  # noqa: F401
from .ring import Direction, NetmapRing, RingSlot  # noqa: F401
from .selfish import SelfishPolicer, detect_selfish, window_calls  # noqa: F401
from .switch import (  # noqa: F401
    COPY_ALWAYS,
    HW_OWNER,
    RX_MODES,
    STAT_FIELDS,
    ZERO_COPY,
    FastioSwitch,
    HwEntry,
    SwitchConfig,
    SyncResult,
)
