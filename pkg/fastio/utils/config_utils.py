import json
import logging
import os
from typing import Any, Dict, Mapping, Optional, Tuple

from fastio.types import Config

ENV_PREFIX = "FASTIO_"

_TRUE_STRINGS = ("1", "true", "yes", "on")
_FALSE_STRINGS = ("0", "false", "no", "off")


def merge_config(config: Config, config_updates: Dict[str, Any]) -> Config:
    """Merge a (potentially nested) dict of kwargs into a config (NamedTuple).

    Parameters
    ----------
    config
        An instantiated Config to update
    config_updates
        A potentially nested dict of settings to update in the Config

    Returns
    -------
    Config
        The updated Config

    Raises
    ------
    ValueError
        If an update names a field the config does not have

    Example
    -------
    ```
    config_updates = {
        "deferred_exit_threshold": 16,
    }
    ept_config = merge_config(EptConfig(), config_updates)
    ```
    """
    config_updates = dict(config_updates)
    for key, value in config_updates.items():
        if key not in config._fields:
            raise ValueError(f"Unrecognized setting {key} for {type(config).__name__}")
        if isinstance(value, dict):
            config_updates[key] = merge_config(getattr(config, key), value)
        elif isinstance(value, list):
            config_updates[key] = tuple(value)
    return config._replace(**config_updates)


def load_config_file(path: str) -> Dict[str, Dict[str, Any]]:
    """Load a JSON config file with one section per component.

    Parameters
    ----------
    path
        Path to a JSON object such as ``{"layout": {...}, "bench": {...}}``

    Returns
    -------
    Dict[str, Dict[str, Any]]
        Mapping from section name to settings

    Raises
    ------
    ValueError
        If the file is not a JSON object of objects
    """
    with open(path, "r") as f:
        try:
            sections = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(
                f"{path}: line {e.lineno}: malformed config ({e.msg})"
            ) from e
    if not isinstance(sections, dict):
        raise ValueError(f"{path}: top level must be an object of sections")
    for name, section in sections.items():
        if not isinstance(section, dict):
            raise ValueError(f"{path}: section {name} must be an object")
    return sections


def parse_setting(raw: str, current: Any) -> Any:
    """Parse a string setting into the type of the current value.

    Integers accept any Python literal base (``0x1000000``, ``16777216``).

    >>> parse_setting("0x10", 4)
    16
    >>> parse_setting("off", True)
    False
    >>> parse_setting("15,32", (0x0F, 0x20))
    (15, 32)
    """
    if isinstance(current, bool):
        lowered = raw.strip().lower()
        if lowered in _TRUE_STRINGS:
            return True
        if lowered in _FALSE_STRINGS:
            return False
        raise ValueError(f"Cannot parse boolean setting from {raw!r}")
    if isinstance(current, int):
        return int(raw, 0)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(part, 0) for part in raw.split(",") if part.strip())
    return raw


def apply_env_overrides(
    config: Config, prefix: str = ENV_PREFIX, environ: Optional[Mapping[str, str]] = None
) -> Config:
    """Override config fields from ``<prefix><FIELD>`` environment variables.

    Nested config fields are left alone; only scalar and tuple settings can be
    overridden from the environment.

    Parameters
    ----------
    config
        Config to update
    prefix
        Environment variable prefix, e.g. ``FASTIO_`` or ``FASTIO_BENCH_``
    environ
        Environment mapping (defaults to ``os.environ``)

    Returns
    -------
    Config
        The updated Config
    """
    environ = os.environ if environ is None else environ
    updates: Dict[str, Any] = {}
    for field in config._fields:
        current = getattr(config, field)
        if isinstance(current, tuple) and hasattr(current, "_fields"):
            continue
        raw = environ.get(f"{prefix}{field.upper()}")
        if raw is None:
            continue
        updates[field] = parse_setting(raw, current)
        logging.debug(f"Environment override {prefix}{field.upper()}={raw}")
    return config._replace(**updates) if updates else config


def resolve_config(
    config: Config,
    file_section: Optional[Dict[str, Any]] = None,
    env_prefix: Optional[str] = None,
    flag_updates: Optional[Dict[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> Config:
    """Resolve a config as defaults < file section < environment < flags.

    Parameters
    ----------
    config
        Config holding the defaults
    file_section
        Settings from the matching config-file section
    env_prefix
        Prefix for environment overrides; None disables them
    flag_updates
        Explicit command-line settings; None values are ignored
    environ
        Environment mapping (defaults to ``os.environ``)

    Returns
    -------
    Config
        The resolved Config
    """
    if file_section:
        config = merge_config(config, file_section)
    if env_prefix is not None:
        config = apply_env_overrides(config, env_prefix, environ)
    if flag_updates:
        explicit = {k: v for k, v in flag_updates.items() if v is not None}
        if explicit:
            config = merge_config(config, explicit)
    return config


def config_to_dict(config: Config) -> Dict[str, Any]:
    """Convert a (potentially nested) config into JSON-compatible dicts."""
    out: Dict[str, Any] = {}
    for key, value in config._asdict().items():
        if isinstance(value, tuple) and hasattr(value, "_fields"):
            out[key] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def split_assignment(text: str) -> Tuple[str, str]:
    """Split a ``key=value`` assignment.

    >>> split_assignment("slab_size=0x1000000")
    ('slab_size', '0x1000000')
    """
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ValueError(f"Expected key=value, got {text!r}")
    return key.strip(), value.strip()
