"""Weakly supervised lesion segmentation for retinal OCT B-scans.

A dual-branch transformer encoder (image + structural prior) is trained from
image-level labels with text guidance; class activation maps and text
similarity maps are then fused into pixel-level pseudo labels.
"""

__version__ = "0.1.0"
