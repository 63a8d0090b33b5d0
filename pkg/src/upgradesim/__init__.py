"""Dependency- and SLA-aware upgrade coordination for IaaS clouds, with a
deterministic cloud simulator and a fixed-batch rolling-upgrade baseline."""

__version__ = "0.1.0"
