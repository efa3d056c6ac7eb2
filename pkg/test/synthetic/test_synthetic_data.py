import unittest

import numpy as np

from fastio.scan import decode_span, naive_scan, scan_page, scan_pair
from fastio.synthetic import (
    HOST_DESTINATION,
    generate_code_page,
    generate_packets,
    generate_random_bytes,
    generate_straddle_pair,
    packet_destination,
)
from fastio.types import PAGE_SIZE


class TestGenerateCodePage(unittest.TestCase):
    """Testing the synthetic code page generator."""

    def test_clean_page_decodes(self) -> None:
        rng = np.random.RandomState(123)
        page, planted = generate_code_page(rng, n_plants=0)
        self.assertEqual(len(page), PAGE_SIZE)
        self.assertEqual(planted, [])
        span = decode_span(page, 0, PAGE_SIZE)
        self.assertEqual(span[-1].end, PAGE_SIZE)

    def test_planted_matches_found(self) -> None:
        rng = np.random.RandomState(123)
        page, planted = generate_code_page(rng, n_plants=5)
        self.assertEqual(len(planted), 5)
        found = {h.offset for h in scan_page(page)}
        self.assertTrue(set(planted) <= found)

    def test_deterministic(self) -> None:
        a = generate_code_page(np.random.RandomState(7), n_plants=3)
        b = generate_code_page(np.random.RandomState(7), n_plants=3)
        self.assertEqual(a, b)


class TestGenerateStraddlePair(unittest.TestCase):
    def test_split(self) -> None:
        rng = np.random.RandomState(0)
        for split in (1, 2):
            predecessor, successor = generate_straddle_pair(rng, split)
            self.assertEqual(naive_scan(predecessor), [])
            self.assertEqual(len(scan_pair(predecessor, successor)), 1)

    def test_bad_split(self) -> None:
        with self.assertRaisesRegex(ValueError, "split must be in"):
            generate_straddle_pair(np.random.RandomState(0), 3)


class TestGeneratePackets(unittest.TestCase):
    def test_headers(self) -> None:
        rng = np.random.RandomState(1)
        packets = generate_packets(rng, 100, 60, [1, 2, HOST_DESTINATION])
        self.assertEqual(packets.shape, (100, 60))
        self.assertEqual(packets.dtype, np.uint8)
        destinations = {packet_destination(p) for p in packets}
        self.assertTrue(destinations <= {1, 2, HOST_DESTINATION})
        self.assertEqual(len(destinations), 3)

    def test_too_small(self) -> None:
        with self.assertRaisesRegex(ValueError, "2-byte header"):
            generate_packets(np.random.RandomState(0), 1, 1, [1])

    def test_random_bytes(self) -> None:
        data = generate_random_bytes(np.random.RandomState(0), 10)
        self.assertEqual(len(data), 10)


if __name__ == "__main__":
    unittest.main()
