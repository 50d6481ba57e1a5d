"""Federated training by evolution strategies, with a back-propagation baseline."""

__version__ = "0.1.0"
