"""Malleable task farming: fault-tolerant server/client, EA workload, and fill-in scheduling simulation."""

__version__ = "0.1.0"
