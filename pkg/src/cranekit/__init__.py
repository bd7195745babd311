"""Weight-editing toolkit for merging paired Instruct/Thinking checkpoints."""

__version__ = "0.1.0"
