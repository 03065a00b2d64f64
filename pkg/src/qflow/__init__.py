"""Flow-consistent value learning for flow-based offline RL policies."""

__version__ = "0.1.0"
