import unittest

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from fastio.scan import (
    DEFAULT_PREDICATE,
    OpcodePredicate,
    hits_to_frame,
    naive_scan,
    scan_buffer,
    scan_page,
    scan_pair,
)
from fastio.synthetic import generate_random_bytes, generate_straddle_pair
from fastio.types import PAGE_SIZE

SEQUENCE = bytes([0x0F, 0x20, 0x18])


def page_with(offset: int, data: bytes) -> bytes:
    page = bytearray(PAGE_SIZE)
    page[offset : offset + len(data)] = data
    return bytes(page)


def straddling_oracle(predecessor: bytes, successor: bytes) -> list:
    offsets = naive_scan(predecessor + successor)
    return [o for o in offsets if PAGE_SIZE - DEFAULT_PREDICATE.length < o < PAGE_SIZE]


class ScanPageTest(unittest.TestCase):
    def test_zero_page(self) -> None:
        self.assertEqual(scan_page(bytes(PAGE_SIZE)), [])

    def test_single_hit(self) -> None:
        hits = scan_page(page_with(100, SEQUENCE), page_index=7)
        self.assertEqual(len(hits), 1)
        self.assertEqual(hits[0].page_index, 7)
        self.assertEqual(hits[0].offset, 100)
        self.assertEqual(hits[0].matched_bytes, SEQUENCE)
        self.assertFalse(hits[0].straddles_boundary)

    def test_hit_inside_immediate(self) -> None:
        hits = scan_page(page_with(0, bytes([0xB8, 0x0F, 0x20, 0x18, 0x00])))
        self.assertEqual([h.offset for h in hits], [1])

    def test_masked_byte_mismatch(self) -> None:
        self.assertEqual(scan_page(page_with(0, bytes([0x0F, 0x20, 0xC0]))), [])

    def test_last_offset_in_page(self) -> None:
        hits = scan_page(page_with(PAGE_SIZE - 3, SEQUENCE))
        self.assertEqual([h.offset for h in hits], [PAGE_SIZE - 3])

    def test_overlapping_hits(self) -> None:
        predicate = OpcodePredicate(prefix=(0x0F,), mask=0x00, value=0x00)
        hits = scan_page(page_with(0, bytes([0x0F, 0x0F, 0x0F])), predicate)
        self.assertEqual([h.offset for h in hits], [0, 1, 2])

    def test_wrong_size(self) -> None:
        with self.assertRaisesRegex(ValueError, "exactly 4096 bytes"):
            scan_page(bytes(100))

    @settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.large_base_example])
    @given(st.binary(min_size=PAGE_SIZE, max_size=PAGE_SIZE))
    def test_matches_oracle(self, page: bytes) -> None:
        self.assertEqual([h.offset for h in scan_page(page)], naive_scan(page))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, PAGE_SIZE - 3), st.integers(0, 7))
    def test_planted_anywhere(self, offset: int, low: int) -> None:
        page = page_with(offset, DEFAULT_PREDICATE.example(low))
        self.assertIn(offset, [h.offset for h in scan_page(page)])


class ScanPairTest(unittest.TestCase):
    def test_split_after_first_byte(self) -> None:
        predecessor = page_with(PAGE_SIZE - 1, b"\x0f")
        successor = page_with(0, b"\x20\x18")
        hits = scan_pair(predecessor, successor, page_index=4)
        self.assertEqual([(h.page_index, h.offset) for h in hits], [(4, PAGE_SIZE - 1)])
        self.assertTrue(hits[0].straddles_boundary)
        self.assertEqual(hits[0].matched_bytes, SEQUENCE)

    def test_split_after_second_byte(self) -> None:
        predecessor = page_with(PAGE_SIZE - 2, b"\x0f\x20")
        successor = page_with(0, b"\x18")
        self.assertEqual([h.offset for h in scan_pair(predecessor, successor)], [PAGE_SIZE - 2])

    def test_zero_pages(self) -> None:
        self.assertEqual(scan_pair(bytes(PAGE_SIZE), bytes(PAGE_SIZE)), [])

    def test_ignores_contained_hits(self) -> None:
        predecessor = page_with(PAGE_SIZE - 3, SEQUENCE)
        successor = page_with(0, SEQUENCE)
        self.assertEqual(scan_pair(predecessor, successor), [])

    def test_generated_straddles(self) -> None:
        rng = np.random.RandomState(0)
        for split in (1, 2):
            predecessor, successor = generate_straddle_pair(rng, split)
            self.assertEqual(scan_page(predecessor), [])
            self.assertEqual(scan_page(successor), [])
            hits = scan_pair(predecessor, successor)
            self.assertEqual([h.offset for h in hits], [PAGE_SIZE - split])

    @settings(max_examples=50, deadline=None)
    @given(st.binary(min_size=3, max_size=3), st.binary(min_size=3, max_size=3))
    def test_matches_oracle(self, tail: bytes, head: bytes) -> None:
        predecessor = page_with(PAGE_SIZE - 3, tail)
        successor = page_with(0, head)
        self.assertEqual(
            [h.offset for h in scan_pair(predecessor, successor)],
            straddling_oracle(predecessor, successor),
        )


class ScanBufferTest(unittest.TestCase):
    def test_buffer(self) -> None:
        data = bytearray(PAGE_SIZE + 10)
        data[50:53] = SEQUENCE
        data[PAGE_SIZE - 1 : PAGE_SIZE + 1] = b"\x0f\x20"
        data[PAGE_SIZE + 1] = 0x18
        hits = scan_buffer(bytes(data))
        self.assertEqual(
            [(h.page_index, h.offset, h.straddles_boundary) for h in hits],
            [(0, 50, False), (0, PAGE_SIZE - 1, True)],
        )

    def test_partial_page_is_padded(self) -> None:
        hits = scan_buffer(SEQUENCE)
        self.assertEqual([h.offset for h in hits], [0])

    def test_empty(self) -> None:
        self.assertEqual(scan_buffer(b""), [])

    def test_frame(self) -> None:
        df = hits_to_frame(scan_buffer(b"\x90" + SEQUENCE))
        self.assertEqual(list(df.columns), ["page_index", "offset", "bytes_hex", "straddles"])
        self.assertEqual(df["bytes_hex"].tolist(), ["0f2018"])
        self.assertEqual(df["offset"].tolist(), [1])


class ScanOracleAcceptanceTest(unittest.TestCase):
    @pytest.mark.complex
    def test_random_and_adversarial_pages(self) -> None:
        rng = np.random.RandomState(123)
        mismatches = 0
        for _ in range(10000):
            page = generate_random_bytes(rng, PAGE_SIZE)
            if [h.offset for h in scan_page(page)] != naive_scan(page):
                mismatches += 1
        for i in range(1000):
            # every offset class, including the last three offsets of the page
            offset = PAGE_SIZE - 3 + i % 3 if i % 4 == 0 else int(rng.randint(0, PAGE_SIZE - 2))
            page = bytearray(generate_random_bytes(rng, PAGE_SIZE))
            sequence = DEFAULT_PREDICATE.example(int(rng.randint(256)))
            n = min(len(sequence), PAGE_SIZE - offset)
            page[offset : offset + n] = sequence[:n]
            successor = bytearray(generate_random_bytes(rng, PAGE_SIZE))
            successor[: len(sequence) - n] = sequence[n:]
            page, successor = bytes(page), bytes(successor)
            if [h.offset for h in scan_page(page)] != naive_scan(page):
                mismatches += 1
            if [h.offset for h in scan_pair(page, successor)] != straddling_oracle(page, successor):
                mismatches += 1
        self.assertEqual(mismatches, 0)


if __name__ == "__main__":
    unittest.main()
