import unittest
from typing import Dict, List

from fastio.machine import Bus, GuestException, MachineState, emulate_patched, execute, is_cr3_load
from fastio.scan import Known, apply_patch, plan_patch, scan_page
from fastio.types import PAGE_SIZE

HIDDEN_LOAD = bytes([0xB8, 0x0F, 0x20, 0x18, 0x00])


class RecordingBus(Bus):
    def __init__(self) -> None:
        self.memory: Dict[int, int] = {}
        self.cr3_loads: List[int] = []
        self.hypercalls = 0
        self.bodies = 0
        self.breakpoints = 0

    def read32(self, va: int) -> int:
        return self.memory.get(va, 0)

    def write32(self, va: int, value: int) -> None:
        self.memory[va] = value

    def load_cr3(self, value: int) -> object:
        self.cr3_loads.append(value)
        return None

    def hypercall(self) -> None:
        self.hypercalls += 1

    def body(self) -> None:
        self.bodies += 1

    def breakpoint(self) -> None:
        self.breakpoints += 1


class ExecuteTest(unittest.TestCase):
    def setUp(self) -> None:
        self.bus = RecordingBus()
        self.state = MachineState(eip=0x1000, cr3=0x7000)
        self.state.esp = 0x8000

    def run_code(self, code: bytes) -> None:
        execute(self.state, code, self.bus)

    def test_hidden_load_is_a_mov(self) -> None:
        self.run_code(HIDDEN_LOAD)
        self.assertEqual(self.state.eax, 0x0018200F)
        self.assertEqual(self.state.eip, 0x1005)
        self.assertEqual(self.bus.cr3_loads, [])

    def test_cr3_load_and_read(self) -> None:
        self.state.eax = 0x5000
        self.run_code(bytes([0x0F, 0x20, 0xD8]))
        self.assertEqual(self.bus.cr3_loads, [0x5000])
        self.run_code(bytes([0x0F, 0x22, 0xDB]))
        self.assertEqual(self.state.register("ebx"), 0x7000)
        self.assertEqual(self.state.eip, 0x1006)
        with self.assertRaisesRegex(GuestException, "control register 0"):
            self.run_code(bytes([0x0F, 0x20, 0xC0]))

    def test_stack_and_calls(self) -> None:
        self.run_code(bytes([0xE8, 0x10, 0x00, 0x00, 0x00]))
        self.assertEqual(self.state.eip, 0x1015)
        self.assertEqual(self.bus.memory[0x7FFC], 0x1005)
        self.run_code(bytes([0xC3]))
        self.assertEqual(self.state.eip, 0x1005)
        self.assertEqual(self.state.esp, 0x8000)
        self.state.interrupt_flag = True
        self.run_code(bytes([0x9C]))
        self.run_code(bytes([0xFA]))
        self.assertFalse(self.state.interrupt_flag)
        self.run_code(bytes([0x9D]))
        self.assertTrue(self.state.interrupt_flag)

    def test_compare_and_branch(self) -> None:
        self.state.eax = 7
        self.run_code(bytes([0x3D, 0x07, 0x00, 0x00, 0x00]))
        self.assertTrue(self.state.zero_flag)
        self.run_code(bytes([0x75, 0x10]))
        self.assertEqual(self.state.eip, 0x1007)
        self.run_code(bytes([0x74, 0xFE]))
        self.assertEqual(self.state.eip, 0x1007)

    def test_moves(self) -> None:
        self.state.set_register("ecx", 0x2000)
        self.state.eax = 42
        self.run_code(bytes([0x89, 0x01]))
        self.assertEqual(self.bus.memory[0x2000], 42)
        self.run_code(bytes([0x8B, 0x11]))
        self.assertEqual(self.state.register("edx"), 42)
        self.run_code(bytes([0x89, 0xD4]))
        self.assertEqual(self.state.esp, 42)
        with self.assertRaisesRegex(GuestException, "addressing mode"):
            self.run_code(bytes([0x89, 0x41, 0x04]))

    def test_traps(self) -> None:
        self.run_code(bytes([0x0F, 0x01, 0xC1]))
        self.run_code(bytes([0x0F, 0x3F]))
        self.run_code(bytes([0xCC]))
        self.run_code(bytes([0xF4]))
        self.assertEqual((self.bus.hypercalls, self.bus.bodies, self.bus.breakpoints), (1, 1, 1))
        self.assertTrue(self.state.halted)

    def test_undefined(self) -> None:
        with self.assertRaises(GuestException) as ctx:
            self.run_code(bytes([0x66, 0x90]))
        self.assertEqual(ctx.exception.vector, "#UD")
        with self.assertRaisesRegex(GuestException, "outside the toy ISA"):
            self.run_code(bytes([0x0F, 0x31]))

    def test_is_cr3_load(self) -> None:
        self.assertTrue(is_cr3_load(bytes([0x0F, 0x20, 0xD8])))
        self.assertFalse(is_cr3_load(bytes([0x0F, 0x20, 0xC0])))
        self.assertFalse(is_cr3_load(HIDDEN_LOAD))


class EmulatePatchedTest(unittest.TestCase):
    def test_emulates_original_instruction(self) -> None:
        page = bytearray(b"\x90" * PAGE_SIZE)
        page[10:15] = HIDDEN_LOAD
        (hit,) = scan_page(page)
        record = plan_patch(hit, Known(10), page)
        apply_patch(record, page)
        state = MachineState(eip=10)
        emulate_patched(record, state, RecordingBus(), 10)
        self.assertEqual(state.eax, 0x0018200F)
        self.assertEqual(state.eip, 15)

    def test_missing_spec(self) -> None:
        page = bytearray(b"\x90" * PAGE_SIZE)
        page[10:15] = HIDDEN_LOAD
        (hit,) = scan_page(page)
        record = plan_patch(hit, Known(10), page)._replace(emulation_spec=None)
        with self.assertRaisesRegex(GuestException, "no emulation spec"):
            emulate_patched(record, MachineState(eip=10), RecordingBus(), 10)


if __name__ == "__main__":
    unittest.main()
