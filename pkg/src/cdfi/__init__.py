"""Birth-death processes coming down from infinity (package under construction)."""

from . import exact, rates

__version__ = "0.1.0"
