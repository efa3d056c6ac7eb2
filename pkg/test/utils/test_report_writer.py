import json
import os
import shutil
import tempfile
import unittest

import pandas as pd

from fastio.scan import OpcodePredicate
from fastio.utils import ReportWriter


class ReportWriterTest(unittest.TestCase):
    def setUp(self) -> None:
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self) -> None:
        shutil.rmtree(self.test_dir)

    def test_paths(self) -> None:
        writer = ReportWriter(out_dir=self.test_dir, run_name="bench-seed3")
        self.assertEqual(writer.report_dir, os.path.join(self.test_dir, "bench-seed3"))
        self.assertTrue(os.path.isdir(writer.report_dir))
        self.assertEqual(writer.path("a.csv"), os.path.join(writer.report_dir, "a.csv"))

    def test_write_config_and_json(self) -> None:
        writer = ReportWriter(out_dir=self.test_dir, run_name="run")
        writer.write_config(OpcodePredicate())
        with open(writer.path("config.json")) as f:
            self.assertEqual(json.load(f), {"prefix": [15, 32], "mask": 56, "value": 24})
        writer.write_json({"b": 1, "a": 2}, "summary.json")
        with open(writer.path("summary.json")) as f:
            text = f.read()
        self.assertLess(text.index('"a"'), text.index('"b"'))

    def test_write_jsonl_and_csv(self) -> None:
        writer = ReportWriter(out_dir=self.test_dir, run_name="run")
        n = writer.write_jsonl([{"x": 1}, {"x": 2}], "exits.jsonl")
        self.assertEqual(n, 2)
        with open(writer.path("exits.jsonl")) as f:
            self.assertEqual([json.loads(line)["x"] for line in f], [1, 2])
        writer.write_csv(pd.DataFrame({"agent_id": [1, 2]}), "agents.csv")
        df = pd.read_csv(writer.path("agents.csv"))
        self.assertEqual(df["agent_id"].tolist(), [1, 2])

    def test_deterministic_output(self) -> None:
        contents = []
        for name in ("one", "two"):
            writer = ReportWriter(out_dir=self.test_dir, run_name=name)
            writer.write_json({"z": [1, 2], "a": {"c": 1, "b": 2}}, "s.json")
            with open(writer.path("s.json")) as f:
                contents.append(f.read())
        self.assertEqual(contents[0], contents[1])


if __name__ == "__main__":
    unittest.main()
