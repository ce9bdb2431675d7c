"""Manager-worker framework for context-aware trajectory prediction."""

__version__ = "0.1.0"
