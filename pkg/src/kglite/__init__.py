"""Knowledge-graph completion with a frozen encoder and lightweight adapters."""

__version__ = "0.1.0"
