import unittest

from hypothesis import HealthCheck, given, settings, strategies as st

from fastio.scan import (
    INT3,
    Known,
    Unknown,
    apply_patch,
    convert_deferred,
    exclude_offsets,
    original_code,
    plan_patch,
    revert_patch,
    scan_page,
    scan_pair,
)
from fastio.types import PAGE_SIZE

HIDDEN_LOAD = bytes([0xB8, 0x0F, 0x20, 0x18, 0x00])


def code_page(offset: int = 0, code: bytes = HIDDEN_LOAD) -> bytearray:
    page = bytearray(b"\x90" * PAGE_SIZE)
    page[offset : offset + len(code)] = code
    return page


class PlanPatchTest(unittest.TestCase):
    def test_known_boundary(self) -> None:
        page = code_page(10)
        (hit,) = scan_page(page, page_index=5)
        record = plan_patch(hit, Known(10), page)
        self.assertEqual(record.page_index, 5)
        self.assertEqual(record.patch_offsets, (10, 11, 12, 13))
        self.assertEqual(record.original_bytes, HIDDEN_LOAD[:4])
        self.assertFalse(record.deferred)
        self.assertEqual(record.emulation_spec.at(10).code, HIDDEN_LOAD)  # type: ignore

    def test_apply_and_revert(self) -> None:
        page = code_page(10)
        before = bytes(page)
        (hit,) = scan_page(page)
        record = plan_patch(hit, Known(10), page)
        apply_patch(record, page)
        self.assertTrue(all(page[o] == INT3 for o in record.patch_offsets))
        self.assertEqual(scan_page(page), [])
        self.assertEqual(original_code(record, page), before)
        revert_patch(record, page)
        self.assertEqual(bytes(page), before)

    def test_deferred_then_converted(self) -> None:
        page = code_page(10)
        (hit,) = scan_page(page)
        record = plan_patch(hit, Unknown(), page)
        self.assertTrue(record.deferred)
        self.assertEqual(record.patch_offsets, ())
        converted = convert_deferred(record, page)
        self.assertTrue(converted.converted)
        self.assertFalse(converted.deferred)
        self.assertEqual(converted.patch_offsets, (11, 12, 13))
        self.assertEqual(converted.emulation_spec.at(11).code, HIDDEN_LOAD[1:4])  # type: ignore
        with self.assertRaisesRegex(ValueError, "not deferred"):
            convert_deferred(converted, page)

    def test_stale_hit(self) -> None:
        page = code_page(10)
        (hit,) = scan_page(page)
        page[12] = 0x00
        with self.assertRaisesRegex(ValueError, "Stale hit"):
            plan_patch(hit, Known(10), page)

    def test_boundary_after_hit(self) -> None:
        page = code_page(10)
        (hit,) = scan_page(page)
        with self.assertRaisesRegex(ValueError, "does not precede"):
            plan_patch(hit, Known(12), page)

    def test_straddling(self) -> None:
        predecessor = code_page(PAGE_SIZE - 3, HIDDEN_LOAD[:3])
        successor = code_page(0, HIDDEN_LOAD[3:])
        (hit,) = scan_pair(predecessor, successor, page_index=8)
        window = bytes(predecessor + successor)
        with self.assertRaisesRegex(ValueError, "needs a successor page"):
            plan_patch(hit, Known(PAGE_SIZE - 3), window)
        record = plan_patch(hit, Known(PAGE_SIZE - 3), window, successor_page=9)
        self.assertEqual(record.pages, (8, 9))
        self.assertEqual(record.page_offsets(8), (PAGE_SIZE - 3, PAGE_SIZE - 2, PAGE_SIZE - 1))
        self.assertEqual(record.page_offsets(9), (0,))
        apply_patch(record, predecessor, successor)
        self.assertEqual(successor[0], INT3)
        self.assertEqual(scan_pair(predecessor, successor), [])
        revert_patch(record, predecessor, successor)
        self.assertEqual(bytes(predecessor + successor), window)

    def test_exclude_offsets(self) -> None:
        page = code_page(10)
        (hit,) = scan_page(page)
        record = exclude_offsets(plan_patch(hit, Known(10), page), [10, 12])
        self.assertEqual(record.patch_offsets, (11, 13))
        self.assertEqual(record.original_bytes, bytes([0x0F, 0x18]))

    @settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.large_base_example])
    @given(st.integers(0, PAGE_SIZE - len(HIDDEN_LOAD)), st.binary(min_size=PAGE_SIZE, max_size=PAGE_SIZE))
    def test_revert_is_bit_exact(self, offset: int, noise: bytes) -> None:
        page = bytearray(noise)
        page[offset : offset + len(HIDDEN_LOAD)] = HIDDEN_LOAD
        before = bytes(page)
        hits = [h for h in scan_page(page) if h.offset == offset + 1]
        record = plan_patch(hits[0], Known(offset), page)
        apply_patch(record, page)
        revert_patch(record, page)
        self.assertEqual(bytes(page), before)


if __name__ == "__main__":
    unittest.main()
