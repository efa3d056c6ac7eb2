import unittest

from fastio.machine import AttackOutcome, AttackScenario
from fastio.scenario import ScenarioConfig, ScenarioRunner, parse_scenario, run_scenario

BASIC = """
# a booted guest making fastio calls
process init pages=2 code=planted
boot init
fastio 4
exec init steps=200
"""


class ParseScenarioTest(unittest.TestCase):
    def test_settings(self) -> None:
        scenario = parse_scenario(
            "seed 3\n"
            "machine interrupt_delivery=posted_shadow_idt\n"
            "ept deferred_exit_threshold=8\n"
            "layout slab_size=0x800000\n"
            "guests 3 ring_pages=2 buffers=8\n"
            "process a\n"
        )
        config = scenario.config
        self.assertEqual(config.seed, 3)
        self.assertEqual(config.machine.interrupt_delivery, "posted_shadow_idt")
        self.assertEqual(config.ept.deferred_exit_threshold, 8)
        self.assertEqual(config.layout.slab_size, 0x800000)
        self.assertEqual((config.guests, config.ring_pages, config.n_buffers), (3, 2, 8))
        self.assertEqual(scenario.actions[0].lineno, 6)
        self.assertEqual(scenario.actions[0].args, ("a",))

    def test_kwargs(self) -> None:
        (line,) = parse_scenario("exec init steps=20 page=1").actions
        self.assertEqual(line.kw("steps"), "20")
        self.assertEqual(line.kw("code", "clean"), "clean")

    def test_malformed_lines(self) -> None:
        cases = [
            ("jump a", "line 1: unknown directive 'jump'"),
            ("process a\nguests 2", "line 2: guests must come before the first action"),
            ("ept fast=1", "line 1: unknown ept setting 'fast'"),
            ("ept deferred_exit_threshold=lots", "line 1: "),
            ("machine terminate", "line 1: machine takes only key=value settings"),
            ("guests 0", r"line 1: guest count 0 outside \[1, "),
            ("guests 2 rings=1", "line 1: unknown guests setting 'rings'"),
            ("seed", "line 1: seed takes one integer"),
            ("exec a steps=1 b", "line 1: positional argument 'b' after key=value"),
            ("\n\nwrite a 0 'x", "line 3: "),
            ("layout slab_size=0x1001", "layout: slab_size=0x1001 must be a positive multiple"),
        ]
        for text, message in cases:
            with self.subTest(text=text):
                with self.assertRaisesRegex(ValueError, message):
                    parse_scenario(text)


class RunScenarioTest(unittest.TestCase):
    def test_basic(self) -> None:
        result = run_scenario(BASIC)
        self.assertEqual(result.ops, 4)
        self.assertTrue(result.attestation.trusted)  # type: ignore
        self.assertFalse(result.breached)
        self.assertEqual(result.violations, [])
        self.assertGreaterEqual(result.counter.category("cr3-exits"), 1)
        self.assertEqual(result.per_op("cr3-exits"), result.counter.category("cr3-exits") / 4)
        self.assertGreater(result.counter.category("int3-exits"), 0)

    def test_attacks_are_detected(self) -> None:
        text = BASIC + "".join(f"attack {s.value}\n" for s in AttackScenario)
        result = run_scenario(text)
        self.assertEqual([run.scenario for run in result.attacks], [s.value for s in AttackScenario])
        self.assertTrue(all(run.outcome is not AttackOutcome.UNDETECTED for run in result.attacks))
        self.assertFalse(result.breached)

    def test_runtime_errors_name_the_line(self) -> None:
        cases = [
            ("process a\nexec a", "line 2: exec before any process was booted"),
            ("process a\nboot a\nboot a", "line 3: the guest is already booted"),
            ("process a\nboot a\nattack Teleport", "line 3: unknown attack 'Teleport'"),
            ("process a\nboot a\nexec b", "line 3: Unknown process"),
            ("process a\nboot a\nwrite a 0 4090 00112233445566", "line 3: write of 7 bytes at offset 4090"),
            ("process a\nboot a\nwrite a 0 0 zz", "line 3: bad hex data 'zz'"),
            ("process a code=weird", "line 1: unknown code kind 'weird'"),
            ("process a\nboot a\nfastio 1 2", r"line 3: usage: fastio \[N\]"),
        ]
        for text, message in cases:
            with self.subTest(text=text):
                with self.assertRaisesRegex(ValueError, message):
                    run_scenario(text)

    def test_rejected_driver(self) -> None:
        text = "process a\nboot a\ndriver certificate=00\n"
        result = run_scenario(text)
        self.assertFalse(result.attestation.trusted)  # type: ignore
        with self.assertRaisesRegex(ValueError, "line 4: the fastio driver was rejected"):
            run_scenario(text + "fastio\n")
        with self.assertRaisesRegex(ValueError, "line 4: the driver is already loaded"):
            run_scenario(text + "driver\n")

    def test_roster_guests_get_rings(self) -> None:
        scenario = parse_scenario("guests 3\nprocess a\nboot a\nfastio\n")
        runner = ScenarioRunner(scenario.config)
        runner.run(scenario.actions)
        self.assertEqual(runner.vm.registry.registered_ids(), [0, 1, 2, 3])
        self.assertEqual(runner.vm.registry.slab(3).n_buffers, 16)

    def test_random_writes_follow_the_seed(self) -> None:
        text = "process a code=planted\nboot a\nfastio\nexec a steps=20\nwrite a 0 100\nexec a steps=20\n"
        first = run_scenario(text, seed=1)
        again = run_scenario(text, seed=1)
        self.assertEqual(first.log.to_records(), again.log.to_records())
        self.assertEqual(first.config.seed, 1)
        self.assertEqual(run_scenario(text, ScenarioConfig(seed=4)).config.seed, 4)


if __name__ == "__main__":
    unittest.main()
