"""General utilities shared across the simulator."""

from .config_utils import (  # noqa: F401
    apply_env_overrides,
    load_config_file,
    merge_config,
    resolve_config,
)
from .core import as_page_array, derive_seed, split_pages  # noqa: F401
from .logger import Logger  # noqa: F401
from .report_writer import ReportWriter, ReportWriterConfig  # noqa: F401
