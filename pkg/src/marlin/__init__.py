"""Hybrid MAPPO training guided by dyadic inter-agent negotiation."""

__version__ = "0.1.0"
