"""Synthetic code pages and packet streams for tests and benchmarks."""

from .synthetic_data import (  # noqa: F401
    HOST_DESTINATION,
    generate_code_page,
    generate_packets,
    generate_random_bytes,
    generate_straddle_pair,
    packet_destination,
)
