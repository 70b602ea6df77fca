"""Split edge learning simulator: protocols, network cost model and planners."""

__version__ = "0.1.0"
