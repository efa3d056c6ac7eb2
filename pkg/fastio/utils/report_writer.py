import json
import logging
import os
from typing import Any, Iterable, Mapping, Optional

import pandas as pd

from fastio.types import Config
from fastio.utils.config_utils import config_to_dict


class ReportWriterConfig(Config):
    """Settings for writing run reports.

    Parameters
    ----------
    out_dir
        The root directory where reports should be saved
    run_name
        The name of this particular run; reports land in ``out_dir/run_name``
    """

    out_dir: str = "reports"
    run_name: Optional[str] = None


class ReportWriter:
    """A class for writing machine-readable run reports.

    Run names are chosen by the caller (typically ``<subcommand>-seed<N>``) rather
    than from the wall clock, so that repeated runs overwrite identical paths.

    Parameters
    ----------
    kwargs
        Settings to merge into ReportWriterConfig

    Attributes
    ----------
    config
        Merged configuration
    report_dir
        Directory where this run's files are written
    """

    def __init__(self, **kwargs: Any) -> None:
        self.config = ReportWriterConfig(**kwargs)
        run_name = self.config.run_name or "run"
        self.report_dir = os.path.join(self.config.out_dir, run_name)
        if not os.path.exists(self.report_dir):
            os.makedirs(self.report_dir)

    def path(self, filename: str) -> str:
        """Return the full path of a report file."""
        return os.path.join(self.report_dir, filename)

    def write_config(self, config: Config, config_filename: str = "config.json") -> None:
        """Dump a (potentially nested) config to file.

        Parameters
        ----------
        config
            Config to write
        config_filename
            Name of file in report directory to write to
        """
        self.write_json(config_to_dict(config), config_filename)

    def write_text(self, text: str, filename: str) -> None:
        """Dump text to filename (e.g., a rendered table).

        Parameters
        ----------
        text
            Text to write
        filename
            Name of file in report directory to write to
        """
        with open(self.path(filename), "w") as f:
            f.write(text)

    def write_json(self, dict_to_write: Mapping[str, Any], filename: str) -> None:
        """Dump a JSON-compatible object with sorted keys.

        Parameters
        ----------
        dict_to_write
            JSON-compatible object to write
        filename
            Name of file in report directory to write to
        """
        if not filename.endswith(".json"):  # pragma: no cover
            logging.warning(
                f"Using write_json() method with a filename without a .json extension: {filename}"
            )
        with open(self.path(filename), "w") as f:
            json.dump(dict_to_write, f, sort_keys=True, indent=2)
            f.write("\n")

    def write_jsonl(self, records: Iterable[Mapping[str, Any]], filename: str) -> int:
        """Dump records as JSON lines; returns the number of lines written."""
        n = 0
        with open(self.path(filename), "w") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True))
                f.write("\n")
                n += 1
        return n

    def write_csv(self, df: pd.DataFrame, filename: str, index: bool = False) -> None:
        """Dump a DataFrame as CSV."""
        df.to_csv(self.path(filename), index=index)
