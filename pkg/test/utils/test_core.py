import unittest

import numpy as np

from fastio.types import PAGE_SIZE
from fastio.utils import as_page_array, derive_seed, split_pages


class UtilsTest(unittest.TestCase):
    def test_derive_seed(self) -> None:
        self.assertEqual(derive_seed(7, "agent", 1), derive_seed(7, "agent", 1))
        self.assertNotEqual(derive_seed(7, "agent", 1), derive_seed(8, "agent", 1))
        self.assertNotEqual(derive_seed(7, "agent", 1), derive_seed(7, "guest", 1))
        self.assertTrue(0 <= derive_seed(123, "x") < 2 ** 32)

    def test_split_pages(self) -> None:
        pages = split_pages(b"\x90" * (PAGE_SIZE + 1))
        self.assertEqual(len(pages), 2)
        self.assertEqual(pages[1][:2], b"\x90\x00")
        self.assertEqual(len(pages[1]), PAGE_SIZE)
        self.assertEqual(split_pages(b""), [])
        self.assertEqual(len(split_pages(bytes(PAGE_SIZE))), 1)

    def test_as_page_array(self) -> None:
        arr = as_page_array(bytes(range(256)) * 16)
        self.assertEqual(arr.dtype, np.uint8)
        self.assertEqual(arr[255], 255)
        with self.assertRaisesRegex(ValueError, "exactly 4096 bytes"):
            as_page_array(b"\x00")


if __name__ == "__main__":
    unittest.main()
