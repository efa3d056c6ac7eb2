"""Detection of selfish guests: agents that are switched for but never switch."""
import logging
from typing import Dict, List, Mapping, Optional

import numpy as np

from fastio.layout import HOST_ID

from .switch import FastioSwitch

DEFAULT_THRESHOLD = 0.5


def window_calls(calls: Mapping[int, int], baseline: Optional[Mapping[int, int]] = None) -> Dict[int, int]:
    """fastio calls per agent made since ``baseline`` was taken."""
    baseline = baseline or {}
    return {a: int(n) - int(baseline.get(a, 0)) for a, n in calls.items()}


def detect_selfish(
    calls: Mapping[int, int], threshold: float = DEFAULT_THRESHOLD, host_id: int = HOST_ID
) -> List[int]:
    """Agents whose fastio calls over a window fall below ``threshold`` times the median.

    The median is taken over the agents that called at all in the window, so
    a majority that never calls cannot drag the reference down to zero. The
    host itself is never flagged. A window in which nobody called flags nobody.

    Parameters
    ----------
    calls
        fastio calls per agent over the window
    threshold
        Fraction of the median below which an agent is selfish
    host_id
        Id exempt from flagging

    Returns
    -------
    List[int]
        Flagged agent ids, sorted

    Examples
    --------
    >>> detect_selfish({0: 10, 1: 10, 2: 10})
    []
    >>> detect_selfish({0: 10, 1: 12, 2: 0})
    [2]
    >>> detect_selfish({0: 10, 1: 0, 2: 0, 3: 0})
    [1, 2, 3]
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    active = [n for n in calls.values() if n > 0]
    if not active:
        return []
    median = float(np.median(active))
    flagged = sorted(a for a, n in calls.items() if a != host_id and n < threshold * median)
    if flagged:
        logging.info(f"Selfish agents {flagged} (median {median:g} calls per window)")
    return flagged


class SelfishPolicer:
    """Windowed selfish-guest policing for a switch.

    At every window boundary the agents flagged over the window just ended
    become drop-eligible for the next one.
    """

    def __init__(self, switch: FastioSwitch, threshold: float = DEFAULT_THRESHOLD) -> None:
        self.switch = switch
        self.threshold = threshold
        self._baseline = switch.call_counts()
        self.history: List[List[int]] = []

    def end_window(self) -> List[int]:
        """Close the current window and apply its verdict."""
        counts = self.switch.call_counts()
        flagged = detect_selfish(window_calls(counts, self._baseline), self.threshold)
        self.switch.set_drop_eligible(flagged)
        self._baseline = counts
        self.history.append(flagged)
        return flagged
