"""Desk-scale lab for context-based parameter-efficient fine-tuning."""

__version__ = "0.1.0"
