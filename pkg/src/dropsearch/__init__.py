"""Search for structured dropout patterns with an asynchronous policy-gradient controller."""

__version__ = "0.1.0"
