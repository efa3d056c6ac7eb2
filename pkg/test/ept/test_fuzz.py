import unittest

import pytest

from fastio.ept import FuzzConfig, FuzzEvent, build_world, generate_events, replay_matches, run_events, run_fuzz


class FuzzTest(unittest.TestCase):
    def test_world(self) -> None:
        config = FuzzConfig(n_pages=8, n_roots=2)
        world = build_world(config)
        self.assertEqual(len(world.code_pages), 8)
        self.assertEqual(len(world.roots), 2)
        self.assertTrue(world.monitor.subtraction_active)

    def test_events_deterministic(self) -> None:
        config = FuzzConfig(n_events=200, seed=3)
        first = generate_events(config, build_world(config))
        second = generate_events(config, build_world(config))
        self.assertEqual(first, second)
        self.assertEqual(FuzzEvent.from_dict(first[0].to_dict()), first[0])

    def test_bad_mix(self) -> None:
        config = FuzzConfig(mix=(1.0, 0.0, 0.0))  # type: ignore
        with self.assertRaisesRegex(ValueError, "non-negative weights"):
            generate_events(config, build_world(config))

    def test_no_breaches(self) -> None:
        for seed in range(3):
            result = run_fuzz(FuzzConfig(n_events=500, seed=seed, deferred_exit_threshold=4))
            self.assertEqual(result.breaches, 0, result.audit.to_string())
            self.assertGreater(len(result.log), 0)

    def test_replay(self) -> None:
        config = FuzzConfig(n_events=300, seed=11)
        result = run_fuzz(config)
        self.assertTrue(replay_matches(config, result.events, list(result.log)))
        self.assertFalse(replay_matches(config, result.events, list(result.log)[:-1]))

    def test_only_writes(self) -> None:
        config = FuzzConfig(n_events=100, mix=(0.0, 1.0, 0.0, 0.0), log_freq=25)
        result = run_events(config, generate_events(config, build_world(config)))
        self.assertEqual(result.breaches, 0)

    @pytest.mark.complex
    def test_long_runs(self) -> None:
        for seed in range(10):
            result = run_fuzz(FuzzConfig(n_events=100000, seed=seed))
            self.assertEqual(result.breaches, 0, result.audit.to_string())


if __name__ == "__main__":
    unittest.main()
