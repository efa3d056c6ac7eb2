import unittest

from hypothesis import given, strategies as st

from fastio.scan import (
    Known,
    Unknown,
    decode_instruction,
    decode_span,
    find_boundary,
    instruction_length,
)

HIDDEN_LOAD = bytes([0xB8, 0x0F, 0x20, 0x18, 0x00])


class InstructionLengthTest(unittest.TestCase):
    def test_lengths(self) -> None:
        cases = [
            (b"\x90", 1),
            (HIDDEN_LOAD, 5),
            (b"\x0f\x20\xd8", 3),
            (b"\x0f\x22\xd8", 3),
            (b"\x89\xc0", 2),
            (b"\x05\x01\x00\x00\x00", 5),
            (b"\xe9\x00\x00\x00\x00", 5),
            (b"\xeb\x10", 2),
            (b"\xcc", 1),
        ]
        for code, length in cases:
            self.assertEqual(instruction_length(code), length, code.hex())

    def test_unsupported_or_truncated(self) -> None:
        self.assertIsNone(instruction_length(b"\x66\x90"))
        self.assertIsNone(instruction_length(b"\xb8\x00"))
        self.assertIsNone(instruction_length(b"\x0f"))
        self.assertIsNone(instruction_length(b""))

    def test_decode_span(self) -> None:
        code = b"\x90" + HIDDEN_LOAD + b"\x90"
        span = decode_span(code, 0, len(code))
        self.assertEqual([i.offset for i in span], [0, 1, 6])
        self.assertEqual(span[1].code, HIDDEN_LOAD)
        self.assertEqual(span[1].end, 6)

    def test_decode_instruction(self) -> None:
        instr = decode_instruction(HIDDEN_LOAD)
        self.assertIsNotNone(instr)
        self.assertEqual(instr.length, 5)  # type: ignore
        self.assertIsNone(decode_instruction(b"\x66"))


class FindBoundaryTest(unittest.TestCase):
    def test_hit_inside_immediate(self) -> None:
        window = b"\x90" + HIDDEN_LOAD
        self.assertEqual(find_boundary(window, 0, 2), Known(1))

    def test_hit_is_instruction(self) -> None:
        self.assertEqual(find_boundary(b"\x0f\x20\xd8", 0, 0), Known(0))

    def test_unknown(self) -> None:
        window = b"\x66\x90\x0f\x20\x18"
        self.assertEqual(find_boundary(window, 0, 2), Unknown())

    def test_later_eip_recovers(self) -> None:
        window = b"\x66\x90" + HIDDEN_LOAD
        self.assertIsInstance(find_boundary(window, 0, 3), Unknown)
        self.assertEqual(find_boundary(window, 2, 3), Known(2))

    def test_invalid_offsets(self) -> None:
        with self.assertRaisesRegex(ValueError, "Invalid boundary search"):
            find_boundary(HIDDEN_LOAD, 3, 1)
        with self.assertRaisesRegex(ValueError, "Invalid boundary search"):
            find_boundary(HIDDEN_LOAD, 0, 5)

    @given(st.integers(0, 20))
    def test_nop_sled(self, n: int) -> None:
        window = b"\x90" * n + HIDDEN_LOAD
        self.assertEqual(find_boundary(window, 0, n + 1), Known(n))


if __name__ == "__main__":
    unittest.main()
