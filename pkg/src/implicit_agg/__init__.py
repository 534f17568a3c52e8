"""Implicit aggregation for visual place recognition.

Learnable aggregation tokens are prepended to the patch tokens of a small
vision transformer before a chosen encoder block; their final states,
flattened and L2-normalized, are the global image descriptor.
"""

__version__ = "0.1.0"
