"""Fine-grained traffic volume inference on signal-gated movement graphs."""

__version__ = "0.1.0"
