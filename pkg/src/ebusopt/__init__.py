"""Electric bus scheduling with nonlinear charging and grid load limits."""

__version__ = "0.1.0"
