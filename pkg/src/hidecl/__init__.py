"""Desk-scale continual learning with hierarchical task-specific prompts.

Subpackages: numerics (array math and Adam), backbone (tiny frozen ViT),
prompts (task-prompt pool), statistics (per-class Gaussian/centroid
stats), objectives (training losses), engine (continual learner),
harness (streams and metrics), theory (decomposition checks), cli.
"""

__version__ = "0.1.0"
