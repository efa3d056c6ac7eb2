import unittest

from fastio.ept import GuestMemory
from fastio.types import PAGE_SIZE


class GuestMemoryTest(unittest.TestCase):
    def test_alloc_is_sequential_and_zeroed(self) -> None:
        memory = GuestMemory(ram_pages=0x104, first_free_page=0x100)
        memory.page(0x101)[0] = 1
        self.assertEqual(memory.alloc_page(), 0x100)
        self.assertEqual(memory.alloc_page(), 0x102)
        self.assertEqual(memory.read_page(0x102), bytes(PAGE_SIZE))
        self.assertEqual(memory.alloc_page(), 0x103)
        with self.assertRaisesRegex(RuntimeError, "exhausted"):
            memory.alloc_page()

    def test_ram_bounds(self) -> None:
        with self.assertRaises(ValueError):
            GuestMemory(ram_pages=0)
        memory = GuestMemory(ram_pages=16)
        self.assertTrue(memory.is_ram(15))
        self.assertFalse(memory.is_ram(16))
        with self.assertRaisesRegex(ValueError, "36-bit"):
            memory.page(1 << 24)

    def test_write_and_read(self) -> None:
        memory = GuestMemory(ram_pages=16)
        memory.write(3, 10, b"\x01\x02")
        self.assertEqual(memory.read_page(3)[10:12], b"\x01\x02")
        memory.write32(3, 100, 0x1_2345_6789)
        self.assertEqual(memory.read32(3, 100), 0x23456789)
        with self.assertRaisesRegex(ValueError, "crosses the page"):
            memory.write(3, PAGE_SIZE - 1, b"ab")

    def test_touched_and_snapshot(self) -> None:
        memory = GuestMemory(ram_pages=16, host_offset=0x500)
        self.assertIsNone(memory.snapshot(7))
        memory.write(7, 0, b"x")
        memory.write(2, 0, b"y")
        self.assertEqual(list(memory.touched()), [2, 7])
        self.assertEqual(memory.snapshot(7)[:1], b"x")  # type: ignore
        self.assertEqual(memory.backing(7), 0x507)


if __name__ == "__main__":
    unittest.main()
