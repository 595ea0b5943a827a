"""Split early-exit DDoS detection and mitigation toolkit."""

__version__ = "0.1.0"
