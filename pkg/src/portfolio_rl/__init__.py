"""Model-free reinforcement learning for portfolio management with EIIE policy networks."""

__version__ = "0.1.0"
