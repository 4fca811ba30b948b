"""llanet: an attention-gated residual image classifier, built from scratch.

Layers are plain numpy kernels (`tensor`), differentiated by a tape
(`autodiff`). The `attention` gate concatenates the previous and current
feature maps and produces a full-dimension sigmoid mask; `network` stacks
residual blocks with a gate after each one. `data`, `training`, `metrics`,
`config`, and `cli` provide the manifest/rebalancing pipeline, the SGD
recipe, challenge scoring, and the command-line surface; `verify` holds the
finite-difference gradient checkers.
"""

__version__ = "0.1.0"

__all__ = [
    "attention",
    "autodiff",
    "cli",
    "config",
    "data",
    "demo",
    "metrics",
    "network",
    "tensor",
    "training",
    "verify",
]
