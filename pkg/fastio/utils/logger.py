import logging
from collections import defaultdict
from typing import DefaultDict, Dict, List, Union

Metric = Union[int, float, str]


class Logger:
    """Class for periodically logging progress metrics of long simulation loops.

    Parameters
    ----------
    log_freq
        Number of units at which to log
    unit
        Name of the counted unit (e.g. "events", "rounds", "runs")

    Attributes
    ----------
    log_freq
        Number of units at which to log
    unit_count
        Running total of number of units passed
    """

    def __init__(self, log_freq: int, unit: str = "events") -> None:
        if log_freq <= 0:
            raise ValueError(f"log_freq must be positive, got {log_freq}")
        self.log_freq = log_freq
        self.unit = unit
        self.unit_count = -1

    def check(self) -> bool:
        """Check if the logging frequency has been met.

        Returns
        -------
        bool
            Whether to log or not based on logging frequency
        """
        self.unit_count += 1
        return self.unit_count % self.log_freq == 0

    def log(self, metrics_dict: Dict[str, Metric]) -> None:
        """Log all metrics in metrics_dict, grouped by section.

        Parameters
        ----------
        metrics_dict
            Dictionary of metric names (keys) and values to log. Names have the form
            ``section/metric`` or ``section/subject/metric``.

        Raises
        ------
        ValueError
            If metric names formatted incorrectly
        """
        score_strings: DefaultDict[str, List[str]] = defaultdict(list)
        for full_name, value in metrics_dict.items():
            if full_name.count("/") == 2:
                section, subject, metric = full_name.split("/")
                metric_name = f"{subject}/{metric}"
            elif full_name.count("/") == 1:
                section, metric_name = full_name.split("/")
            else:
                raise ValueError(
                    "Metric should have form section/subject/metric or "
                    f"section/metric, not: {full_name}"
                )
            if isinstance(value, float):
                score_strings[section].append(f"{metric_name}={value:0.3f}")
            else:
                score_strings[section].append(f"{metric_name}={value}")

        string = f"[{max(self.unit_count, 0)} {self.unit}]:"
        for section, scores in score_strings.items():
            string += f" {section.upper()}:[{', '.join(scores)}]"
        logging.info(string)
