"""Probe-driven residual caching and the baseline velocity providers.

All providers follow the sampler contract: ``provider(latent, c, meter, T)``
returns ``(velocity, Decision)``. Cached quantities are residuals
``r = y - x``; a reuse step reconstructs the velocity as ``x + r``.

Naming: ``newest`` is the most recent recompute (smaller step index, the
``alpha`` entry), ``previous`` the one before it (``beta``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidConfig, InvalidFraction, InvalidInterval, ShapeMismatch
from .numerics import check_same_shape, l1_rel
from .sampler import COMPUTE_FIRST, RECOMPUTE, REUSE, Decision, SamplerConfig, with_steps
from .toydit import ModelWeights, forward_full, forward_probe, forward_resume, residual

__all__ = [
    "CacheEntry", "CacheState", "DiCacheConfig", "Decision",
    "DiCacheProvider", "StepReductionProvider", "UniformCacheProvider", "VanillaProvider",
    "combine_residuals", "dicache_step", "estimate_error", "expected_block_evals",
    "gamma_hat", "should_reuse",
]


@dataclass(frozen=True)
class DiCacheConfig:
    reuse_threshold: float = 0.1
    probe_depth: int = 1
    dcta_enabled: bool = True
    gamma_clamp: Optional[float] = None

    def validate(self, num_blocks: int) -> "DiCacheConfig":
        if not self.reuse_threshold >= 0:
            raise InvalidConfig(f"reuse_threshold must be >= 0, got {self.reuse_threshold}")
        if not 1 <= self.probe_depth <= num_blocks - 1:
            raise InvalidConfig(f"probe_depth {self.probe_depth} outside [1, {num_blocks - 1}]")
        if self.gamma_clamp is not None and not self.gamma_clamp > 0:
            raise InvalidConfig(f"gamma_clamp must be > 0, got {self.gamma_clamp}")
        return self


@dataclass
class CacheEntry:
    step_index: int
    full_residual: np.ndarray
    probe_residual: np.ndarray

    def __post_init__(self):
        check_same_shape(self.full_residual, self.probe_residual)


@dataclass
class CacheState:
    accumulated_error: float = 0.0
    prev_probe_feature: Optional[np.ndarray] = None
    newest: Optional[CacheEntry] = None
    previous: Optional[CacheEntry] = None
    n_recompute: int = 0  # recomputes after the first step
    log: list = field(default_factory=list)

    def refresh(self, entry: CacheEntry) -> None:
        self.previous = self.newest
        self.newest = entry


def estimate_error(probe_now: np.ndarray, probe_prev: np.ndarray) -> float:
    """Relative L1 change of the probe feature against the previous step."""
    return l1_rel(probe_now, probe_prev)


def should_reuse(accumulated: float, eps_hat: float, delta: float) -> bool:
    return accumulated + eps_hat <= delta


def gamma_hat(r_now_m: np.ndarray, newest: CacheEntry, previous: CacheEntry,
              clamp: Optional[float] = None) -> float:
    """Trajectory parameter from probe residuals.

    Ratio of the current probe residual's distance to the older cache over the
    distance between the two caches. Falls back to 1.0 (plain newest-cache
    reuse) when the two cached probe residuals coincide.
    """
    check_same_shape(r_now_m, newest.probe_residual)
    check_same_shape(r_now_m, previous.probe_residual)
    num = l1_rel(r_now_m, previous.probe_residual)
    den = l1_rel(newest.probe_residual, previous.probe_residual)
    g = 1.0 if den == 0.0 else num / den
    if clamp is not None:
        g = min(max(g, 0.0), clamp)
    return g


def combine_residuals(newest: CacheEntry, previous: CacheEntry, g: float) -> np.ndarray:
    """``r_prev + g * (r_newest - r_prev)``, exact at the endpoints ``g`` = 0 and 1."""
    r_a = newest.full_residual
    r_b = previous.full_residual
    check_same_shape(r_a, r_b)
    if not math.isfinite(g):
        raise ValueError(f"gamma must be finite, got {g}")
    if g == 1.0:
        return r_a.copy()
    if g == 0.0:
        return r_b.copy()
    return (r_b + np.float32(g) * (r_a - r_b)).astype(np.float32, copy=False)


def expected_block_evals(num_blocks: int, num_steps: int, probe_depth: int, n_recompute: int) -> int:
    """Cost of a DiCache run; ``n_recompute`` excludes the first step."""
    return num_blocks + (num_steps - 1) * probe_depth + n_recompute * (num_blocks - probe_depth)


def dicache_step(state: CacheState, latent, c, cfg: DiCacheConfig, model: ModelWeights,
                 meter, num_steps: int):
    """One step of probe-profiled caching. Returns ``(velocity, Decision)``."""
    M = model.num_blocks
    m = cfg.probe_depth
    x = latent.x
    delta = cfg.reuse_threshold

    if latent.k == num_steps:
        out = forward_full(model, x, latent.t, c, record_layers=(m,), meter=meter)
        y_m = out.layers[m]
        y = out.final_output
        state.refresh(CacheEntry(latent.k, residual(y, x), residual(y_m, x)))
        state.accumulated_error = 0.0
        state.prev_probe_feature = y_m
        decision = Decision(COMPUTE_FIRST, estimated_error=0.0,
                            accumulated_error=0.0, accumulated_error_after=0.0)
        velocity = y
    else:
        y_m = forward_probe(model, x, latent.t, c, m, meter=meter).probe_feature
        eps = estimate_error(y_m, state.prev_probe_feature)
        state.accumulated_error += eps
        acc = state.accumulated_error
        if acc <= delta:
            g = None
            if cfg.dcta_enabled and state.previous is not None:
                g = gamma_hat(residual(y_m, x), state.newest, state.previous, cfg.gamma_clamp)
                r = combine_residuals(state.newest, state.previous, g)
            else:
                r = state.newest.full_residual
            velocity = (x + r).astype(np.float32, copy=False)
            decision = Decision(REUSE, estimated_error=eps, gamma_hat=g,
                                accumulated_error=acc, accumulated_error_after=acc)
        else:
            y = forward_resume(model, y_m, m, meter=meter)
            state.refresh(CacheEntry(latent.k, residual(y, x), residual(y_m, x)))
            state.accumulated_error = 0.0
            state.n_recompute += 1
            velocity = y
            decision = Decision(RECOMPUTE, estimated_error=eps,
                                accumulated_error=acc, accumulated_error_after=0.0)
        state.prev_probe_feature = y_m

    # threshold semantics and cost identity, checked on every step
    if decision.action == REUSE:
        assert decision.accumulated_error <= delta
    elif decision.action == RECOMPUTE:
        assert decision.accumulated_error > delta and state.accumulated_error == 0.0
    steps_done = num_steps - latent.k + 1
    assert meter.block_evals == expected_block_evals(M, steps_done, m, state.n_recompute), (
        "block-eval accounting drifted from the cost identity")

    state.log.append(decision)
    return velocity, decision


# ---------------------------------------------------------------------------
# providers


class DiCacheProvider:
    def __init__(self, model: ModelWeights, cfg: DiCacheConfig):
        self.model = model
        self.cfg = cfg.validate(model.num_blocks)
        self.state = CacheState()

    def prepare(self, cfg: SamplerConfig) -> SamplerConfig:
        self.state = CacheState()
        return cfg

    def __call__(self, latent, c, meter, num_steps):
        return dicache_step(self.state, latent, c, self.cfg, self.model, meter, num_steps)


class VanillaProvider:
    """Full forward pass every step."""

    def __init__(self, model: ModelWeights):
        self.model = model

    def __call__(self, latent, c, meter, num_steps):
        v = forward_full(self.model, latent.x, latent.t, c, meter=meter).final_output
        action = COMPUTE_FIRST if latent.k == num_steps else RECOMPUTE
        return v, Decision(action)


class StepReductionProvider(VanillaProvider):
    """Vanilla sampling on a coarser grid of ``round(fraction * T)`` steps."""

    def __init__(self, model: ModelWeights, fraction: float):
        if not 0.0 < fraction <= 1.0:
            raise InvalidFraction(f"fraction must be in (0, 1], got {fraction}")
        super().__init__(model)
        self.fraction = fraction

    def effective_steps(self, num_steps: int) -> int:
        steps = math.floor(self.fraction * num_steps + 0.5)
        if self.fraction * num_steps < 1 or steps < 1:
            raise InvalidFraction(f"fraction {self.fraction} leaves no steps out of {num_steps}")
        return steps

    def prepare(self, cfg: SamplerConfig) -> SamplerConfig:
        return with_steps(cfg, self.effective_steps(cfg.num_steps))


class UniformCacheProvider:
    """Recompute every ``interval`` steps, reuse the newest residual otherwise."""

    def __init__(self, model: ModelWeights, interval: int):
        if int(interval) != interval or interval < 1:
            raise InvalidInterval(f"interval must be an integer >= 1, got {interval}")
        self.model = model
        self.interval = int(interval)
        self.cached: Optional[np.ndarray] = None

    def prepare(self, cfg: SamplerConfig) -> SamplerConfig:
        self.cached = None
        return cfg

    def __call__(self, latent, c, meter, num_steps):
        if (num_steps - latent.k) % self.interval == 0:
            v = forward_full(self.model, latent.x, latent.t, c, meter=meter).final_output
            self.cached = residual(v, latent.x)
            action = COMPUTE_FIRST if latent.k == num_steps else RECOMPUTE
            return v, Decision(action)
        if self.cached is None or self.cached.shape != latent.x.shape:
            raise ShapeMismatch("no cached residual matching the latent")
        return (latent.x + self.cached).astype(np.float32, copy=False), Decision(REUSE)


def vanilla_provider(model):
    return VanillaProvider(model)


def step_reduction_provider(model, fraction):
    return StepReductionProvider(model, fraction)


def uniform_cache_provider(model, interval):
    return UniformCacheProvider(model, interval)
