"""Clustered federated learning simulator with label-free test-time cluster assignment."""

__version__ = "0.1.0"
