"""Label-efficient hierarchical leaf-vein segmentation.

Semi-supervised training with partial-label support, tiled whole-blade
inference, and a synthetic venation generator for end-to-end checks.
"""

__version__ = "0.1.0"
