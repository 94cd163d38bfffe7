"""Curation toolkit for medical vision-language training and evaluation data."""

__version__ = "0.1.0"
