"""Flow-matching Euler sampler with block-evaluation accounting.

The model output is treated as ``dx/dt`` and integrated from ``t = 1`` (noise)
to ``t = 0`` on the uniform grid ``t_k = k / T`` with ``dt = -1 / T``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DiCacheError, InvalidConfig, IoFailure, ShapeMismatch
from .numerics import SplitMix64, check_finite, check_same_shape

DLAT_MAGIC = b"DLAT"
DLAT_VERSION = 1

# decision actions
COMPUTE_FIRST = "ComputeFirst"
REUSE = "Reuse"
RECOMPUTE = "Recompute"


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    noise_seed: int = 0
    n_tokens: int = 64
    d_model: int = 64

    def validate(self) -> "SamplerConfig":
        if self.num_steps < 1:
            raise InvalidConfig(f"num_steps must be >= 1, got {self.num_steps}")
        if self.n_tokens < 1 or self.d_model < 1:
            raise InvalidConfig("n_tokens and d_model must be positive")
        if not 0 <= self.noise_seed < 2**64:
            raise InvalidConfig("noise_seed must fit in 64 unsigned bits")
        return self


@dataclass
class LatentState:
    x: np.ndarray
    t: float
    k: int


@dataclass
class CostMeter:
    block_evals: int = 0
    recompute_steps: int = 0
    reuse_steps: int = 0

    def add_blocks(self, n: int) -> None:
        if n < 0:
            raise ValueError("block count increments must be non-negative")
        self.block_evals += n


@dataclass
class Decision:
    action: str
    estimated_error: Optional[float] = None
    gamma_hat: Optional[float] = None
    accumulated_error: Optional[float] = None
    accumulated_error_after: Optional[float] = None


@dataclass
class StepRecord:
    step_index: int
    t: float
    action: str
    estimated_error: Optional[float]
    accumulated_error: Optional[float]
    accumulated_error_after: Optional[float]
    gamma_hat: Optional[float]
    block_evals_added: int
    block_evals: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunReport:
    num_steps: int
    steps: list = field(default_factory=list)
    block_evals: int = 0
    recompute_steps: int = 0
    reuse_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "block_evals": self.block_evals,
            "recompute_steps": self.recompute_steps,
            "reuse_steps": self.reuse_steps,
            "steps": [s.to_dict() for s in self.steps],
        }


def init_noise(cfg: SamplerConfig) -> LatentState:
    cfg.validate()
    rng = SplitMix64(cfg.noise_seed)
    x = rng.gaussian_array(cfg.n_tokens * cfg.d_model).astype(np.float32)
    return LatentState(x=x.reshape(cfg.n_tokens, cfg.d_model), t=1.0, k=cfg.num_steps)


def euler_step(s: LatentState, v: np.ndarray, T: int) -> LatentState:
    check_same_shape(v, s.x)
    if s.k < 1:
        raise InvalidConfig("cannot step past t = 0")
    dt = np.float32(-1.0 / T)
    x = (s.x + dt * v.astype(np.float32, copy=False)).astype(np.float32, copy=False)
    return LatentState(x=x, t=(s.k - 1) / T, k=s.k - 1)


def run(cfg: SamplerConfig, provider, c: np.ndarray):
    """Integrate from noise to ``t = 0``, querying ``provider`` once per step.

    ``provider(latent, c, meter, num_steps)`` returns ``(velocity, Decision)``.
    A provider may define ``prepare(cfg) -> SamplerConfig`` (called once
    before the loop; used for fresh per-run state and step-count changes).

    Returns ``(x_0, RunReport)``.
    """
    cfg.validate()
    if hasattr(provider, "prepare"):
        cfg = provider.prepare(cfg)
    T = cfg.num_steps
    state = init_noise(cfg)
    meter = CostMeter()
    report = RunReport(num_steps=T)
    while state.k >= 1:
        before = meter.block_evals
        try:
            v, decision = provider(state, c, meter, T)
            check_finite(v, "velocity")
            if v.shape != state.x.shape:
                raise ShapeMismatch(f"velocity shape {v.shape} != latent {state.x.shape}")
        except DiCacheError as exc:
            exc.step_index = state.k
            exc.args = (f"step {state.k}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        if decision.action == REUSE:
            meter.reuse_steps += 1
        else:
            meter.recompute_steps += 1
        report.steps.append(StepRecord(
            step_index=state.k,
            t=state.t,
            action=decision.action,
            estimated_error=decision.estimated_error,
            accumulated_error=decision.accumulated_error,
            accumulated_error_after=decision.accumulated_error_after,
            gamma_hat=decision.gamma_hat,
            block_evals_added=meter.block_evals - before,
            block_evals=meter.block_evals,
        ))
        state = euler_step(state, v, T)

    report.block_evals = meter.block_evals
    report.recompute_steps = meter.recompute_steps
    report.reuse_steps = meter.reuse_steps
    # accounting conservation
    assert report.block_evals == sum(s.block_evals_added for s in report.steps)
    return state.x, report


def with_steps(cfg: SamplerConfig, num_steps: int) -> SamplerConfig:
    return replace(cfg, num_steps=num_steps)


# ---------------------------------------------------------------------------
# DLAT latent files


def encode_dlat(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"DLAT stores 2-D tensors, got shape {x.shape}")
    n, d = x.shape
    header = DLAT_MAGIC + struct.pack("<III", DLAT_VERSION, n, d)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_dlat(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != DLAT_MAGIC:
        raise IoFailure("not a DLAT file (bad magic)")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != DLAT_VERSION:
        raise IoFailure(f"unsupported DLAT version {version}")
    expected = 16 + 4 * n * d
    if len(blob) != expected:
        raise IoFailure(f"DLAT size {len(blob)} != expected {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=16).astype(np.float32).reshape(n, d)


def write_dlat(path, x: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_dlat(x))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_dlat(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_dlat(blob)
