"""Minimax Q-estimation for offline reinforcement learning on tabular MDPs."""

__version__ = "0.1.0"
