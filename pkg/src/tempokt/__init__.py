"""Knowledge tracing with an encoder-decoder transformer over multi-granularity lag-time features."""

__version__ = "0.1.0"
