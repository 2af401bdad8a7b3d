"""Stable-spike regularized training for spiking networks, on a numpy autodiff core."""

__version__ = "0.1.0"
