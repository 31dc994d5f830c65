"""Desk-scale imitation learning via density estimation of the expert's
occupancy measure followed by maximum-occupancy-entropy RL, plus an
exact-computation verification suite for the underlying bounds."""

__version__ = "0.1.0"
