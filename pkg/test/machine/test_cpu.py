import unittest

import pytest

from fastio.ept import ExitReason, Verdict
from fastio.machine import (
    POSTED_SHADOW_IDT,
    RETURN_ADDRESS,
    GuestMachine,
    GuestVm,
    Mode,
    Switched,
)


def booted_vm(n_processes: int = 1, **kwargs) -> GuestVm:
    vm = GuestVm(**kwargs)
    for i in range(n_processes):
        vm.create_process(f"p{i}")
    vm.boot("p0")
    return vm


class MachineConfigTest(unittest.TestCase):
    def test_invalid_settings(self) -> None:
        vm = GuestVm()
        with self.assertRaisesRegex(ValueError, "interrupt_delivery"):
            GuestMachine(vm.monitor, interrupt_delivery="polling")
        with self.assertRaisesRegex(ValueError, "attack_policy"):
            GuestMachine(vm.monitor, attack_policy="ignore")
        with self.assertRaisesRegex(ValueError, "step_limit"):
            GuestMachine(vm.monitor, step_limit=0)

    def test_no_driver(self) -> None:
        vm = booted_vm()
        with self.assertRaisesRegex(ValueError, "No fastio driver"):
            vm.machine.fastio_call()


class FastioCallTest(unittest.TestCase):
    def setUp(self) -> None:
        self.vm = booted_vm()
        self.assertTrue(self.vm.load_driver().trusted)
        self.machine = self.vm.machine

    def test_first_call_validates_caller_root(self) -> None:
        result = self.machine.fastio_call()
        self.assertEqual(result.exits, 1)
        self.assertEqual(self.vm.log[-1].reason, ExitReason.CR3_LOAD_EXIT)
        self.assertEqual(result.state.eip, RETURN_ADDRESS)
        self.assertEqual(result.state.mode, Mode.GUEST_KERNEL)
        self.assertIn(self.vm.process("p0").cr3, self.machine.state.cr3_targets.recent())

    def test_warm_calls_are_exitless(self) -> None:
        self.machine.fastio_call()
        mark = len(self.vm.log)
        for _ in range(100):
            self.assertEqual(self.machine.fastio_call().exits, 0)
        self.assertEqual(len(self.vm.log), mark)
        self.assertEqual(self.machine.calls, 101)

    def test_body_runs_privileged(self) -> None:
        modes = []
        self.machine.fastio_call(lambda m: modes.append(m.state.mode))
        self.assertEqual(modes, [Mode.PRIVILEGED_PPT])

    def test_body_error_faults_guest(self) -> None:
        def broken(machine: GuestMachine) -> None:
            raise KeyError("ring")

        self.machine.fastio_call(broken)
        self.assertTrue(self.machine.terminated)

    @pytest.mark.complex
    def test_ten_thousand_exitless_calls(self) -> None:
        self.machine.fastio_call()
        total = sum(self.machine.fastio_call().exits for _ in range(10000))
        self.assertEqual(total, 0)


class Cr3TargetTest(unittest.TestCase):
    def cycle_exits(self, vm: GuestVm, names, rounds: int) -> int:
        exits = 0
        for _ in range(rounds):
            for name in names:
                if vm.switch_to(name) is not None:
                    exits += 1
        return exits

    def test_three_roots_fit(self) -> None:
        vm = booted_vm(3)
        self.assertEqual(self.cycle_exits(vm, ["p1", "p2", "p0"], 1), 3)
        self.assertEqual(self.cycle_exits(vm, ["p1", "p2", "p0"], 5), 0)

    def test_four_roots_thrash(self) -> None:
        vm = booted_vm(4)
        self.cycle_exits(vm, ["p1", "p2", "p3", "p0"], 1)
        self.assertEqual(self.cycle_exits(vm, ["p1", "p2", "p3", "p0"], 5), 20)

    def test_exitless_switch_result(self) -> None:
        vm = booted_vm(2)
        vm.switch_to("p1")
        vm.switch_to("p0")
        self.assertIsInstance(vm.machine.load_cr3(vm.process("p1").cr3), Switched)


class InterruptTest(unittest.TestCase):
    def test_exit_on_all_holds_until_if(self) -> None:
        vm = booted_vm()
        machine = vm.machine
        event = machine.inject_interrupt()
        self.assertEqual(event.reason, ExitReason.INTERRUPT)  # type: ignore
        self.assertEqual(event.verdict, Verdict.RESUMED)  # type: ignore
        self.assertEqual(machine.interrupts_delivered, 0)
        machine.state.interrupt_flag = True
        machine.step()
        self.assertEqual(machine.interrupts_delivered, 1)

    def test_interrupt_during_the_body_waits_for_popf(self) -> None:
        vm = booted_vm()
        vm.load_driver()
        machine = vm.machine
        machine.state.interrupt_flag = True
        seen = []

        def body(m: GuestMachine) -> None:
            seen.append((m.state.mode, m.state.interrupt_flag, m.inject_interrupt()))

        machine.fastio_call(body)
        ((mode, interrupt_flag, event),) = seen
        self.assertEqual((mode, interrupt_flag), (Mode.PRIVILEGED_PPT, False))
        self.assertEqual(event.reason, ExitReason.INTERRUPT)  # type: ignore
        self.assertEqual(event.verdict, Verdict.RESUMED)  # type: ignore
        self.assertEqual(machine.interrupts_delivered, 1)
        self.assertEqual(machine.violations, [])
        self.assertNotIn(Verdict.ATTACK_DETECTED, [e.verdict for e in vm.log])

    def test_held_interrupt_taken_with_ppt_live_is_an_attack(self) -> None:
        vm = booted_vm()
        vm.load_driver()
        machine = vm.machine
        self.assertEqual(machine.inject_interrupt().verdict, Verdict.RESUMED)  # type: ignore

        def body(m: GuestMachine) -> None:
            m.state.interrupt_flag = True

        machine.fastio_call(body)
        attacks = [e for e in vm.log if e.verdict == Verdict.ATTACK_DETECTED]
        self.assertEqual(len(attacks), 1)
        self.assertEqual(attacks[0].reason, ExitReason.INTERRUPT)
        self.assertIn("held interrupt", attacks[0].get("detail"))
        self.assertTrue(machine.terminated)

    def test_posted_delivery_is_exitless(self) -> None:
        vm = booted_vm(interrupt_delivery=POSTED_SHADOW_IDT)
        machine = vm.machine
        machine.state.interrupt_flag = True
        mark = len(vm.log)
        self.assertIsNone(machine.inject_interrupt())
        self.assertEqual(len(vm.log), mark)
        self.assertEqual(machine.interrupts_delivered, 1)

    def test_schedule_validation(self) -> None:
        with self.assertRaisesRegex(ValueError, "non-negative"):
            booted_vm().machine.schedule_interrupt(-1)


class StoppedMachineTest(unittest.TestCase):
    def test_halt_then_clear(self) -> None:
        vm = booted_vm()
        machine = vm.machine
        machine.step()
        self.assertTrue(machine.state.halted)
        with self.assertRaisesRegex(RuntimeError, "stopped"):
            machine.step()
        machine.clear_fault()
        self.assertFalse(machine.stopped)

    def test_unmapped_fetch_faults(self) -> None:
        vm = booted_vm()
        machine = vm.machine
        machine.state.eip = 0x10000000
        machine.step()
        self.assertEqual(machine.fault.vector, "#PF")  # type: ignore
        self.assertEqual(vm.log[-1].get("source"), "guest")
        self.assertIsNotNone(machine.clear_fault())


if __name__ == "__main__":
    unittest.main()
