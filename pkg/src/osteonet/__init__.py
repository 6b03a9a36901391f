"""Multimodal hierarchical classification of osteosarcoma histopathology tiles.

Image and radiomic embeddings are fused by a softmax attention gate and fed to
two hierarchical heads (non-tumor vs. tumor, non-viable vs. viable) trained
with an uncertainty-weighted multi-task loss.
"""

__version__ = "0.1.0"

CLASS_NAMES = ("Non-Tumor", "Non-Viable-Tumor", "Viable-Tumor")
CLASS_ABBREV = ("NT", "NVT", "VT")
