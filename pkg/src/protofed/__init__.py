"""Privacy-preserving federated prototype learning simulator."""

__version__ = "0.1.0"
