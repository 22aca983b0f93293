"""Deformable Gaussian splatting on the CPU with fused temporal embeddings."""

__version__ = "0.1.0"
