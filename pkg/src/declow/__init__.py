"""declow: deterministic low-precision decentralized training simulator."""

__version__ = "0.1.0"
