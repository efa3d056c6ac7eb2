import io
import json
import os
import shutil
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from typing import List, Mapping, Optional, Tuple

import pandas as pd

from fastio.cli import EXIT_BREACH, EXIT_MALFORMED, EXIT_OK, main
from fastio.types import PAGE_SIZE


def run_cli(argv: List[str], environ: Optional[Mapping[str, str]] = None) -> Tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        status = main(argv, environ=environ or {})
    return status, out.getvalue(), err.getvalue()


class CliTest(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.mkdtemp()

    def tearDown(self) -> None:
        shutil.rmtree(self.tmp)

    def _file(self, name: str, data: bytes) -> str:
        path = os.path.join(self.tmp, name)
        with open(path, "wb") as f:
            f.write(data)
        return path

    def test_layout(self) -> None:
        status, out, _ = run_cli(["layout"])
        self.assertEqual(status, EXIT_OK)
        geometry = json.loads(out)
        self.assertEqual(geometry["max_guests"], 191)
        self.assertEqual(geometry["host_slab"][1] - geometry["host_slab"][0], geometry["slab_size"])

    def test_layout_resolution_order(self) -> None:
        config = self._file("config.json", json.dumps({"layout": {"slab_size": 0x800000}}).encode())
        _, out, _ = run_cli(["layout", "--config", config])
        self.assertEqual(json.loads(out)["slab_size"], 0x800000)
        env = {"FASTIO_LAYOUT_SLAB_SIZE": "0x400000"}
        _, out, _ = run_cli(["layout", "--config", config], env)
        self.assertEqual(json.loads(out)["slab_size"], 0x400000)
        _, out, _ = run_cli(["layout", "--config", config, "--slab-size", "0x200000"], env)
        self.assertEqual(json.loads(out)["slab_size"], 0x200000)

    def test_bad_layout(self) -> None:
        status, _, err = run_cli(["layout", "--slab-size", "0x1001"])
        self.assertEqual(status, EXIT_MALFORMED)
        self.assertIn("slab_size", err)

    def test_missing_config_file(self) -> None:
        status, _, _ = run_cli(["layout", "--config", os.path.join(self.tmp, "none.json")])
        self.assertEqual(status, EXIT_MALFORMED)

    def test_scan(self) -> None:
        data = bytearray(2 * PAGE_SIZE)
        data[PAGE_SIZE + 100 : PAGE_SIZE + 103] = b"\x0f\x20\x18"
        status, out, _ = run_cli(["scan", self._file("code.bin", bytes(data))])
        self.assertEqual(status, EXIT_OK)
        frame = pd.read_csv(io.StringIO(out))
        self.assertEqual(len(frame), 1)
        self.assertEqual((frame["page_index"][0], frame["offset"][0]), (1, 100))

    def test_scan_with_predicate_flags(self) -> None:
        data = bytearray(PAGE_SIZE)
        data[10:13] = b"\x0f\x22\x18"
        path = self._file("code.bin", bytes(data))
        _, out, _ = run_cli(["scan", path])
        self.assertEqual(len(pd.read_csv(io.StringIO(out))), 0)
        _, out, _ = run_cli(["scan", path, "--prefix", "0x0f,0x22"])
        self.assertEqual(len(pd.read_csv(io.StringIO(out))), 1)

    def test_attack_all(self) -> None:
        status, out, _ = run_cli(["attack", "--all"])
        self.assertEqual(status, EXIT_OK)
        frame = pd.read_csv(io.StringIO(out))
        self.assertEqual(len(frame), 3)
        self.assertNotIn("Undetected", set(frame["outcome"]))

    def test_attack_unknown_scenario(self) -> None:
        status, _, err = run_cli(["attack", "Teleport"])
        self.assertEqual(status, EXIT_MALFORMED)
        self.assertIn("Unknown attack scenario", err)

    def test_attack_scenario_file(self) -> None:
        script = "process a\nboot a\nattack ExitPptJump\n"
        status, out, _ = run_cli(["attack", "--scenario-file", self._file("ok.txt", script.encode())])
        self.assertEqual(status, EXIT_OK)
        self.assertEqual(len(pd.read_csv(io.StringIO(out))), 1)
        bad = self._file("bad.txt", b"process a\nboot a\nleap\n")
        status, _, err = run_cli(["attack", "--scenario-file", bad])
        self.assertEqual(status, EXIT_MALFORMED)
        self.assertIn("line 3", err)

    def test_ept_trace_writes_reports(self) -> None:
        argv = ["ept-trace", "--builtin", "cpu-bound", "--iterations", "2", "--seed", "5", "--out", self.tmp]
        status, out, _ = run_cli(argv)
        self.assertEqual(status, EXIT_OK)
        self.assertEqual(out, "")
        report_dir = os.path.join(self.tmp, "ept-trace-seed5")
        counters = pd.read_csv(os.path.join(report_dir, "counters.csv"))
        self.assertIn("per_op", counters.columns)
        with open(os.path.join(report_dir, "exits.jsonl")) as f:
            records = [json.loads(line) for line in f]
        self.assertEqual(len(records), int(counters["count"].sum()))
        self.assertTrue(os.path.exists(os.path.join(report_dir, "config.json")))

    def test_ept_trace_needs_input(self) -> None:
        self.assertEqual(run_cli(["ept-trace"])[0], EXIT_MALFORMED)

    def test_bench(self) -> None:
        argv = ["bench", "--agents", "tx1-rx3", "--packets", "500", "--hw-ring-slots", "64", "--out", self.tmp]
        status, _, _ = run_cli(argv, {"FASTIO_SEED": "2"})
        self.assertEqual(status, EXIT_OK)
        report_dir = os.path.join(self.tmp, "bench-seed2")
        with open(os.path.join(report_dir, "summary.json")) as f:
            summary = json.load(f)
        self.assertEqual(summary["config"], "tx1-rx3")
        self.assertEqual(summary["seed"], 2)
        self.assertEqual(summary["delivered"] + summary["dropped"], 500)
        self.assertEqual(len(pd.read_csv(os.path.join(report_dir, "agents.csv"))), 4)

    def test_bench_invalid(self) -> None:
        self.assertEqual(run_cli(["bench", "--pktsize", "20"])[0], EXIT_MALFORMED)

    def test_fuzz(self) -> None:
        status, out, _ = run_cli(["fuzz", "--events", "200", "--seeds", "2"])
        self.assertEqual(status, EXIT_OK)
        frame = pd.read_csv(io.StringIO(out))
        self.assertEqual(sorted(set(frame["seed"])), [0, 1])

    def test_exit_codes_are_distinct(self) -> None:
        self.assertEqual(len({EXIT_OK, EXIT_BREACH, EXIT_MALFORMED}), 3)


if __name__ == "__main__":
    unittest.main()
