"""Training-free N:M activation sparsification for transformer linear layers.

Subpackages cover mask scoring and generation, offline scoring factors,
symmetric W8A8 quantization with channel smoothing, a compressed
sparse-dense matmul kernel, a seeded toy transformer, perturbation-based
sensitivity analysis with a skip planner, and end-to-end pipelines.
"""

__version__ = "0.1.0"
