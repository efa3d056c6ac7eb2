import unittest

import numpy as np

from fastio.layout import HOST_ID
from fastio.switch import BenchConfig, SelfishPolicer, build_switch, detect_selfish, window_calls
from fastio.synthetic import HOST_DESTINATION, generate_packets


class DetectSelfishTest(unittest.TestCase):
    def test_threshold(self) -> None:
        with self.assertRaisesRegex(ValueError, "threshold"):
            detect_selfish({1: 1}, threshold=0)
        self.assertEqual(detect_selfish({}), [])
        self.assertEqual(detect_selfish({1: 10, 2: 2, 3: 10}), [2])
        self.assertEqual(detect_selfish({1: 10, 2: 6, 3: 4, 4: 8}), [])
        self.assertEqual(detect_selfish({1: 10, 2: 6, 3: 4, 4: 8}, threshold=0.9), [2, 3])

    def test_selfish_majority_is_flagged(self) -> None:
        self.assertEqual(detect_selfish({0: 10, 1: 0, 2: 0, 3: 0}), [1, 2, 3])
        self.assertEqual(detect_selfish({1: 9, 2: 0, 3: 0, 4: 0, 5: 8}), [2, 3, 4])
        self.assertEqual(detect_selfish({0: 0, 1: 0, 2: 0}), [])

    def test_host_exempt(self) -> None:
        self.assertEqual(detect_selfish({0: 0, 1: 10, 2: 10}), [])

    def test_window_calls(self) -> None:
        self.assertEqual(window_calls({1: 5, 2: 7}, {1: 2}), {1: 3, 2: 7})
        self.assertEqual(window_calls({1: 5}), {1: 5})


class SelfishPolicerTest(unittest.TestCase):
    def test_flags_then_forgives(self) -> None:
        switch, (tx,), (rx1, rx2) = build_switch(BenchConfig(n_rx=2, hw_ring_slots=8, ring_slots=32))
        policer = SelfishPolicer(switch)
        for _ in range(4):
            switch.sync(tx)
            switch.sync(rx1)
        self.assertEqual(policer.end_window(), [rx2])
        self.assertEqual(switch.drop_eligible, {rx2})

        rng = np.random.RandomState(0)
        switch.submit(tx, generate_packets(rng, 4, 60, [rx2]))
        switch.txsync(tx)
        self.assertEqual(switch.rxsync(rx1).dropped, 4)
        for agent_id in (tx, rx2):
            switch.sync(agent_id)
        self.assertEqual(policer.end_window(), [])
        self.assertEqual(switch.drop_eligible, set())
        self.assertEqual(policer.history, [[rx2], []])

    def test_host_keeps_serving_when_every_guest_is_selfish(self) -> None:
        switch, (tx,), (rx1, rx2) = build_switch(BenchConfig(n_rx=2, hw_ring_slots=8, ring_slots=32))
        switch.add_agent(HOST_ID)
        policer = SelfishPolicer(switch)
        for _ in range(4):
            switch.sync(HOST_ID)
        self.assertEqual(policer.end_window(), [tx, rx1, rx2])
        self.assertNotIn(HOST_ID, switch.drop_eligible)

        rng = np.random.RandomState(1)
        switch.submit(tx, generate_packets(rng, 4, 60, [HOST_DESTINATION]))
        switch.submit(tx, generate_packets(rng, 2, 60, [rx1]))
        switch.txsync(tx)
        result = switch.rxsync(HOST_ID)
        self.assertEqual((result.delivered, result.dropped), (4, 2))
        self.assertEqual(len(switch.receive(HOST_ID)), 4)
        self.assertTrue(switch.conserved())


if __name__ == "__main__":
    unittest.main()
