import unittest

from fastio.ept import CATEGORIES, ExitCounter, ExitEvent, ExitLog, ExitReason, Verdict, categorize

R = Verdict.RESUMED


class CategorizeTest(unittest.TestCase):
    def test_categories(self) -> None:
        cases = [
            (ExitEvent.make(ExitReason.EPT_EXEC_VIOLATION, R), "exec-exits"),
            (ExitEvent.make(ExitReason.EPT_WRITE_VIOLATION, R, kind="GuestPageTable"), "ptable-exits"),
            (ExitEvent.make(ExitReason.EPT_WRITE_VIOLATION, R, kind="Normal"), "write-exits"),
            (ExitEvent.make(ExitReason.CR3_LOAD_EXIT, R), "cr3-exits"),
            (ExitEvent.make(ExitReason.INT3_PATCH, R, op="cr3-load"), "cr3-exits"),
            (ExitEvent.make(ExitReason.INT3_PATCH, R, op="other"), "int3-exits"),
            (ExitEvent.make(ExitReason.INTERRUPT, R), "interrupt-exits"),
            (ExitEvent.make(ExitReason.HYPERCALL, R), "hypercalls"),
            (ExitEvent.make(ExitReason.NOT_PRESENT_FAULT, R, source="interrupt"), "interrupt-exits"),
            (ExitEvent.make(ExitReason.NOT_PRESENT_FAULT, R, source="guest"), "faults"),
            (ExitEvent.make(ExitReason.NOT_PRESENT_FAULT, R, guest_id=2), "pgpa-faults"),
        ]
        for event, category in cases:
            self.assertEqual(categorize(event), category, event)
            self.assertIn(category, CATEGORIES)


class ExitLogTest(unittest.TestCase):
    def setUp(self) -> None:
        self.log = ExitLog()
        self.log.append(ExitEvent.make(ExitReason.CR3_LOAD_EXIT, R, 0x101, source="boot"))
        self.log.append(ExitEvent.make(ExitReason.HYPERCALL, R, nr=1))
        self.log.append(ExitEvent.make(ExitReason.HYPERCALL, Verdict.ATTACK_DETECTED, nr=9))

    def test_context_sorted(self) -> None:
        event = ExitEvent.make(ExitReason.HYPERCALL, R, b=2, a=1)
        self.assertEqual(event.context, (("a", 1), ("b", 2)))
        self.assertEqual(event.get("b"), 2)
        self.assertIsNone(event.get("c"))

    def test_counter(self) -> None:
        counter = self.log.counter()
        self.assertEqual(counter.total, 3)
        self.assertEqual(counter.category("hypercalls"), 2)
        self.assertEqual(counter.by_verdict["AttackDetected"], 1)
        self.assertEqual(self.log.counter(mark=1).category("cr3-exits"), 0)
        self.assertEqual(len(self.log.since(2)), 1)

    def test_frame(self) -> None:
        df = self.log.counter().to_frame(per_op=2)
        self.assertEqual(list(df["category"]), list(CATEGORIES))
        row = df.set_index("category").loc["hypercalls"]
        self.assertEqual(row["count"], 2)
        self.assertAlmostEqual(row["per_op"], 1.0)
        self.assertNotIn("per_op", ExitCounter().to_frame().columns)

    def test_records(self) -> None:
        restored = ExitLog.from_records(self.log.to_records())
        self.assertEqual(list(restored), list(self.log))
        self.assertEqual(self.log.to_records()[0]["reason"], "Cr3LoadExit")


if __name__ == "__main__":
    unittest.main()
