"""Seed-reproducible pandemic medical supply chain simulator with an audited enforcement ledger."""

__version__ = "0.1.0"
