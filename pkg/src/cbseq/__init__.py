"""Channel-level behavior sequence malware traffic detection."""

__version__ = "0.1.0"
