"""Rumour verification with post-attribution explanations and an LLM judge."""

__version__ = "0.1.0"
