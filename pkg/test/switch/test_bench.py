import unittest

import pytest

from fastio.switch import (
    BENCH_GRID,
    COPY_ALWAYS,
    ZERO_COPY,
    BenchConfig,
    grid_config,
    modeled_seconds,
    run_bench,
    run_grid,
    validate_config,
)

SMALL = BenchConfig(packets=2000, hw_ring_slots=64)


class BenchConfigTest(unittest.TestCase):
    def test_validate(self) -> None:
        self.assertEqual(validate_config(SMALL), SMALL)
        with self.assertRaisesRegex(ValueError, "at least one transmitter"):
            validate_config(SMALL._replace(n_tx=0))
        with self.assertRaisesRegex(ValueError, "pkt_size"):
            validate_config(SMALL._replace(pkt_size=59))
        with self.assertRaisesRegex(ValueError, "mode"):
            validate_config(SMALL._replace(mode="copy"))
        with self.assertRaisesRegex(ValueError, "nothing to send"):
            validate_config(SMALL._replace(n_tx=3, packets=2))
        with self.assertRaisesRegex(ValueError, "Batch sizes"):
            validate_config(SMALL._replace(app_batch=0))

    def test_grid_config(self) -> None:
        config = grid_config("tx3-rx1", packets=10)
        self.assertEqual((config.n_tx, config.n_rx, config.packets), (3, 1, 10))
        with self.assertRaisesRegex(ValueError, "Unknown bench configuration"):
            grid_config("tx9-rx9")

    def test_modeled_seconds(self) -> None:
        totals = {"transmitted": 10, "delivered": 10, "dropped": 0, "copies": 10}
        config = BenchConfig(pkt_size=100)
        expected = (20 * 20.0 + 10 * (10.0 + 5.0) + 2 * 40.0) * 1e-9
        self.assertAlmostEqual(modeled_seconds(config, totals, 2), expected)


class RunBenchTest(unittest.TestCase):
    def test_zero_copy_single_receiver(self) -> None:
        summary = run_bench(SMALL).summary
        self.assertEqual(summary["transmitted"], 2000)
        self.assertEqual(summary["delivered"], 2000)
        self.assertEqual(summary["dropped"], 0)
        self.assertEqual(summary["violations"], 0)
        self.assertEqual(summary["matches"], 2000)
        self.assertEqual(summary["copies"], 0)
        self.assertEqual(summary["tx_copies"], 0)
        self.assertEqual(summary["rx_copies"], 0)
        self.assertEqual(summary["dma_bytes"], 2000 * 60)

    def test_copy_always_copies_every_delivery(self) -> None:
        summary = run_bench(SMALL._replace(mode=COPY_ALWAYS)).summary
        self.assertEqual(summary["copies"], summary["delivered"])
        self.assertEqual(summary["rx_copies"], summary["copies"])
        self.assertEqual(summary["tx_copies"], 0)
        self.assertEqual(summary["mismatches"], 0)

    def test_zero_copy_copies_only_mismatches(self) -> None:
        result = run_bench(SMALL._replace(n_rx=3))
        summary = result.summary
        self.assertGreater(summary["mismatches"], 0)
        self.assertEqual(summary["copies"], summary["mismatches"])
        self.assertEqual(summary["matches"] + summary["mismatches"], summary["delivered"])
        self.assertEqual(summary["delivered"] + summary["dropped"], 2000)
        self.assertEqual(list(result.agents["role"]), ["tx", "rx", "rx", "rx"])

    def test_copies_cost_throughput(self) -> None:
        zc = run_bench(SMALL).summary
        copy = run_bench(SMALL._replace(mode=COPY_ALWAYS)).summary
        big = run_bench(SMALL._replace(mode=COPY_ALWAYS, pkt_size=1500)).summary
        self.assertGreater(zc["aggregate_mpps"], copy["aggregate_mpps"])
        self.assertGreater(copy["aggregate_mpps"], big["aggregate_mpps"])

    def test_deterministic(self) -> None:
        config = SMALL._replace(n_tx=2, n_rx=2, seed=3)
        self.assertEqual(run_bench(config).summary, run_bench(config).summary)
        self.assertNotIn("wall_seconds", run_bench(config).summary)
        self.assertIn("wall_seconds", run_bench(config, wall_clock=True).summary)

    def test_fair_transmitters(self) -> None:
        for n_tx, n_rx in ((3, 1), (2, 2)):
            for mode in (ZERO_COPY, COPY_ALWAYS):
                summary = run_bench(SMALL._replace(n_tx=n_tx, n_rx=n_rx, mode=mode, packets=3000)).summary
                shares = summary["tx_shares"]
                self.assertEqual(len(shares), n_tx)
                self.assertAlmostEqual(sum(shares), 1.0)
                for share in shares:
                    self.assertLess(abs(share - 1.0 / n_tx), 0.2 / n_tx, (n_tx, n_rx, mode, shares))

    def test_single_receiver_never_drops(self) -> None:
        for mode in (ZERO_COPY, COPY_ALWAYS):
            for pkt_size in (60, 1500):
                summary = run_bench(SMALL._replace(mode=mode, pkt_size=pkt_size)).summary
                self.assertEqual(summary["dropped"], 0, (mode, pkt_size))
                self.assertEqual(summary["delivered"], 2000)

    def test_drop_rate_grows_with_receivers(self) -> None:
        for mode in (ZERO_COPY, COPY_ALWAYS):
            for pkt_size in (60, 1500):
                rates = [
                    run_bench(SMALL._replace(n_rx=n_rx, mode=mode, pkt_size=pkt_size)).summary["drop_rate"]
                    for n_rx in (1, 2, 3)
                ]
                self.assertEqual(rates[0], 0.0)
                self.assertLessEqual(rates[0], rates[1], (mode, pkt_size, rates))
                self.assertLessEqual(rates[0], rates[2], (mode, pkt_size, rates))

    def test_stuck_run(self) -> None:
        with self.assertRaisesRegex(RuntimeError, "no progress"):
            run_bench(SMALL._replace(max_rounds=1))

    def test_grid_conserves_packets(self) -> None:
        frame = run_grid(BenchConfig(packets=600, hw_ring_slots=64))
        self.assertEqual(len(frame), len(BENCH_GRID) * 2 * 2)
        self.assertTrue(((frame["delivered"] + frame["dropped"]) == 600).all())
        zc = frame[frame["mode"] == ZERO_COPY]
        self.assertTrue((zc["copies"] == zc["mismatches"]).all())
        rzc = frame[frame["mode"] == COPY_ALWAYS]
        self.assertTrue((rzc["copies"] == rzc["delivered"]).all())

    @pytest.mark.complex
    def test_million_packets_no_drops(self) -> None:
        summary = run_bench(BenchConfig(packets=1000000)).summary
        self.assertEqual(summary["delivered"], 1000000)
        self.assertEqual(summary["dropped"], 0)


if __name__ == "__main__":
    unittest.main()
