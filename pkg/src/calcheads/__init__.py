"""Find, read and fine-tune the attention heads and MLPs that do arithmetic in a small transformer."""

__version__ = "0.1.0"
