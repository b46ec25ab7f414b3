"""Probe-driven feature caching for diffusion transformers, on a toy numpy DiT."""

from .cachepolicy import (
    CacheEntry,
    CacheState,
    DiCacheConfig,
    DiCacheProvider,
    StepReductionProvider,
    UniformCacheProvider,
    VanillaProvider,
)
from .sampler import CostMeter, Decision, LatentState, RunReport, SamplerConfig, run
from .toydit import ModelConfig, ModelWeights, init_weights

__version__ = "0.1.0"
