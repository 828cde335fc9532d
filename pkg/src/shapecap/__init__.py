"""Weakly-supervised unpaired captioning of synthetic shape scenes."""

__version__ = "0.1.0"
