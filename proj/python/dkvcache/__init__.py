"""Masked diffusion LM inference with delayed KV caching."""

from ._core import (
    ConfigError,
    LayoutError,
    Model,
    ModelConfig,
    alpha_bar,
    corrupt,
    generate,
    normalize_variant,
    schedule,
)

__all__ = [
    "ConfigError",
    "LayoutError",
    "Model",
    "ModelConfig",
    "alpha_bar",
    "corrupt",
    "generate",
    "normalize_variant",
    "schedule",
]
