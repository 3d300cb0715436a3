"""Federated remaining-useful-life prediction with decentralized validation and robust aggregation."""

__version__ = "0.1.0"
