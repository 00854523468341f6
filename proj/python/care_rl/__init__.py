"""Group-relative policy optimisation with consistency-aware rewards."""

from ._care_rl import *  # noqa: F401,F403
from ._care_rl import __doc__  # noqa: F401

__all__ = [name for name in dir() if not name.startswith("_")]
