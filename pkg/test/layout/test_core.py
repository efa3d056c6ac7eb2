import unittest

from fastio.layout import GiB, MiB, PptLayout


class PptLayoutTest(unittest.TestCase):
    def test_default_constants(self) -> None:
        layout = PptLayout().validate()
        self.assertEqual(layout.max_guests, 191)
        self.assertEqual(layout.slab_range(2), (48 * MiB, 64 * MiB))
        self.assertEqual(layout.device_window, (4 * MiB, 4 * MiB + 516 * 4096))
        self.assertEqual(layout.pgpa_start, 4 * GiB + 16 * MiB)
        self.assertEqual(layout.slab_range(0), (16 * MiB, 32 * MiB))
        self.assertEqual(layout.slab_range(190)[1], 0xC0000000)

    def test_slab_range_out_of_range(self) -> None:
        layout = PptLayout()
        with self.assertRaisesRegex(ValueError, "out of range"):
            layout.slab_range(191)
        with self.assertRaisesRegex(ValueError, "out of range"):
            layout.slab_range(-1)

    def test_validate_ppt_address(self) -> None:
        layout = PptLayout()
        start, end = layout.slab_range(3)
        self.assertTrue(layout.validate_ppt_address(start, 3))
        self.assertTrue(layout.validate_ppt_address(end - 1, 3))
        self.assertFalse(layout.validate_ppt_address(end, 3))
        self.assertFalse(layout.validate_ppt_address(start - 1, 3))
        self.assertFalse(layout.validate_ppt_address(start, 191))
        self.assertEqual(layout.slab_owner(start + 5), 3)
        self.assertEqual(layout.slab_owner(layout.pdva), -1)

    def test_pgpa_pages(self) -> None:
        layout = PptLayout()
        page = layout.slab_gpa_page(2, 5)
        self.assertEqual(page, (4 * GiB + 16 * MiB) // 4096 + 2 * 4096 + 5)
        self.assertEqual(layout.pgpa_slab_owner(page), (2, 5))
        with self.assertRaisesRegex(ValueError, "outside the slab region"):
            layout.pgpa_slab_owner(layout.pgpa_base_page)
        with self.assertRaisesRegex(ValueError, "Slab page"):
            layout.slab_gpa_page(2, layout.slab_pages)

    def test_private_stack(self) -> None:
        layout = PptLayout()
        device_end = layout.device_window[1]
        self.assertEqual(layout.private_stack_window, (device_end, device_end + 4096))
        self.assertEqual(layout.private_stack_top(0), device_end + 4096)

    def test_overrides(self) -> None:
        layout = PptLayout(slab_size=8 * MiB).validate()
        self.assertEqual(layout.max_guests, 382)
        self.assertEqual(layout.slab_range(2), (32 * MiB, 40 * MiB))

    def test_validate_errors(self) -> None:
        with self.assertRaisesRegex(ValueError, "multiple of 4096"):
            PptLayout(slab_size=1000).validate()
        with self.assertRaisesRegex(ValueError, "past ppt_va_start"):
            PptLayout(device_pages=4096).validate()
        with self.assertRaisesRegex(ValueError, "No slab"):
            PptLayout(slab_size=4 * GiB).validate()
        with self.assertRaisesRegex(ValueError, "overflow into slab memory"):
            PptLayout(pgpa_start=4 * GiB + 4096).validate()

    def test_geometry(self) -> None:
        geometry = PptLayout().geometry()
        self.assertEqual(geometry["max_guests"], 191)
        self.assertEqual(geometry["device_pages"], 516)
        self.assertEqual(geometry["host_slab"], [16 * MiB, 32 * MiB])


if __name__ == "__main__":
    unittest.main()
