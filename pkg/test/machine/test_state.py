import unittest

from fastio.machine import FLAG_IF, Cr3Targets, MachineState, Mode


class Cr3TargetsTest(unittest.TestCase):
    def test_least_recently_used(self) -> None:
        targets = Cr3Targets()
        targets.pin(0x9000)
        for value in (0x1000, 0x2000, 0x3000):
            targets.remember(value)
        self.assertTrue(targets.lookup(0x1000))
        self.assertEqual(targets.remember(0x4000), 0x2000)
        self.assertEqual(targets.recent(), [0x3000, 0x1000, 0x4000])
        self.assertNotIn(0x2000, targets)
        self.assertIn(0x9000, targets)
        self.assertFalse(targets.lookup(0x2000))

    def test_pinned_never_cached(self) -> None:
        targets = Cr3Targets()
        targets.remember(0x9000)
        targets.pin(0x9000)
        self.assertEqual(targets.recent(), [])
        self.assertIsNone(targets.remember(0x9000))
        self.assertEqual(targets.slots(), [0x9000, None, None, None])

    def test_single_slot(self) -> None:
        targets = Cr3Targets(n_slots=1)
        self.assertEqual(targets.capacity, 0)
        self.assertIsNone(targets.remember(0x1000))
        self.assertFalse(targets.lookup(0x1000))
        with self.assertRaisesRegex(ValueError, "at least 1"):
            Cr3Targets(n_slots=0)

    def test_copy_is_independent(self) -> None:
        targets = Cr3Targets()
        targets.remember(0x1000)
        other = targets.copy()
        other.forget(0x1000)
        self.assertEqual(targets.recent(), [0x1000])
        self.assertEqual(other.recent(), [])


class MachineStateTest(unittest.TestCase):
    def test_mode_follows_cr3(self) -> None:
        state = MachineState(cr3=0x5000)
        self.assertEqual(state.mode, Mode.GUEST_KERNEL)
        state.user = True
        self.assertEqual(state.mode, Mode.GUEST_USER)
        state.cr3_targets.pin(0x5000)
        self.assertEqual(state.mode, Mode.PRIVILEGED_PPT)
        self.assertEqual(state.root, 5)

    def test_registers(self) -> None:
        state = MachineState()
        state.set_register("ebx", -1)
        self.assertEqual(state.register("ebx"), 0xFFFFFFFF)
        state.eax = 1 << 33
        self.assertEqual(state.eax, 0)
        with self.assertRaisesRegex(ValueError, "Unknown register"):
            state.register("rax")

    def test_flags(self) -> None:
        state = MachineState(flags=0)
        self.assertEqual(state.flags, 0x2)
        state.interrupt_flag = True
        self.assertEqual(state.flags & FLAG_IF, FLAG_IF)
        state.zero_flag = True
        state.interrupt_flag = False
        self.assertTrue(state.zero_flag)
        self.assertFalse(state.interrupt_flag)

    def test_copy_and_dict(self) -> None:
        state = MachineState(eip=0x10, cr3=0x3000)
        state.esp = 0x8000
        other = state.copy()
        other.esp = 0
        self.assertEqual(state.esp, 0x8000)
        d = state.to_dict()
        self.assertEqual(d["esp"], 0x8000)
        self.assertEqual(d["mode"], "GuestKernel")
        self.assertEqual(len(d["cr3_targets"]), 4)


if __name__ == "__main__":
    unittest.main()
