"""Function-preserving DNN obfuscation against trace-based architecture stealing."""

__version__ = "0.1.0"
