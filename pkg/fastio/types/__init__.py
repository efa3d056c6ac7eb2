"""Shared aliases for addresses, page contents and settings classes."""
from typing import NamedTuple

from .data import PAGE_SIZE, Address, GpaPage, PageData  # noqa: F401

# Settings classes subclass this: typed fields with defaults, updated by ``_replace``
Config = NamedTuple
