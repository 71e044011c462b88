"""Relation extraction with a learned graph of relation ties."""

__version__ = "0.1.0"
