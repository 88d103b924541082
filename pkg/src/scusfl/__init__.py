"""Simulator for semantic-communication-enhanced U-shaped split federated learning."""

__version__ = "0.1.0"
