"""Dual-mask vision-language transformer with conditional generation and
self-training over synthetic scenes."""

__version__ = "0.1.0"
