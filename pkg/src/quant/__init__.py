"""Model-based RL trading research engine with RSRS timing."""

__version__ = "0.1.0"
