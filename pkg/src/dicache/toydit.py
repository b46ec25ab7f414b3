"""A small, deterministic diffusion transformer in numpy.

The model is ``M`` pre-layer-norm transformer blocks operating at constant
width ``d``. Time and condition are injected once, at the input::

    h0  = x + (time_embedding(t) @ W_t + c @ W_c)      broadcast over tokens
    y^i = B_i(...B_1(h0))
    v   = LN_final(y^M) @ W_out                        (counted as part of block M)

Probe, resume and full passes share :func:`_apply_blocks`, so stopping after
block ``m`` and resuming from that feature reproduces the full pass bit for
bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import BadProbeDepth, InvalidConfig, OutOfRangeTime, ShapeMismatch
from .numerics import SplitMix64, check_same_shape

GELU_C = np.float32(0.7978845608)
GELU_K = np.float32(0.044715)


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 12
    d_model: int = 64
    n_heads: int = 4
    n_tokens: int = 64
    mlp_ratio: int = 4
    ln_epsilon: float = 1e-5
    weight_seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.num_blocks < 2:
            raise InvalidConfig(f"num_blocks must be >= 2, got {self.num_blocks}")
        if self.d_model < 2 or self.d_model % 2:
            raise InvalidConfig(f"d_model must be a positive even integer, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise InvalidConfig(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.n_tokens < 1:
            raise InvalidConfig(f"n_tokens must be >= 1, got {self.n_tokens}")
        if self.mlp_ratio < 1:
            raise InvalidConfig(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if not self.ln_epsilon > 0:
            raise InvalidConfig(f"ln_epsilon must be > 0, got {self.ln_epsilon}")
        if not 0 <= self.weight_seed < 2**64:
            raise InvalidConfig("weight_seed must fit in 64 unsigned bits")
        return self


@dataclass
class BlockParams:
    w_qkv: np.ndarray      # d x 3d
    w_attn_out: np.ndarray  # d x d
    w_mlp_in: np.ndarray   # d x (mlp_ratio * d)
    w_mlp_out: np.ndarray  # (mlp_ratio * d) x d
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    blocks: list
    w_time: np.ndarray
    w_cond: np.ndarray
    final_gain: np.ndarray
    final_bias: np.ndarray
    w_out: np.ndarray

    @property
    def num_blocks(self) -> int:
        return self.config.num_blocks

    def arrays(self):
        """Every parameter array in initialization order."""
        for b in self.blocks:
            yield from (b.w_qkv, b.w_attn_out, b.w_mlp_in, b.w_mlp_out,
                        b.ln1_gain, b.ln1_bias, b.ln2_gain, b.ln2_bias)
        yield from (self.w_time, self.w_cond, self.final_gain, self.final_bias, self.w_out)


@dataclass
class BlockOutputs:
    probe_feature: Optional[np.ndarray] = None
    final_output: Optional[np.ndarray] = None
    layers: dict = field(default_factory=dict)


def _xavier(rng: SplitMix64, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    vals = rng.uniform_array(fan_in * fan_out, -bound, bound)
    return vals.astype(np.float32).reshape(fan_in, fan_out)


def init_weights(cfg: ModelConfig) -> ModelWeights:
    """Draw all parameters from one splitmix64 stream seeded by ``cfg.weight_seed``.

    Traversal order: blocks ascending, each block QKV, attention-out, MLP-in,
    MLP-out (row-major); then the time and condition projections; then the
    output projection. Layer-norm gains start at 1 and biases at 0 and
    consume no draws.
    """
    cfg.validate()
    d = cfg.d_model
    hidden = cfg.mlp_ratio * d
    rng = SplitMix64(cfg.weight_seed)
    ones = lambda: np.ones(d, dtype=np.float32)  # noqa: E731
    zeros = lambda: np.zeros(d, dtype=np.float32)  # noqa: E731

    blocks = []
    for _ in range(cfg.num_blocks):
        blocks.append(BlockParams(
            w_qkv=_xavier(rng, d, 3 * d),
            w_attn_out=_xavier(rng, d, d),
            w_mlp_in=_xavier(rng, d, hidden),
            w_mlp_out=_xavier(rng, hidden, d),
            ln1_gain=ones(), ln1_bias=zeros(),
            ln2_gain=ones(), ln2_bias=zeros(),
        ))
    w_time = _xavier(rng, d, d)
    w_cond = _xavier(rng, d, d)
    w_out = _xavier(rng, d, d)
    weights = ModelWeights(cfg, blocks, w_time, w_cond, ones(), zeros(), w_out)
    for arr in weights.arrays():
        arr.setflags(write=False)
    return weights


def time_embedding(t: float, d: int) -> np.ndarray:
    """Sinusoidal embedding, interleaved ``[sin, cos, sin, cos, ...]``."""
    if not 0.0 <= t <= 1.0:
        raise OutOfRangeTime(f"t={t} outside [0, 1]")
    j = np.arange(d // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * j / d)
    arg = 1000.0 * t * omega
    emb = np.empty(d, dtype=np.float64)
    emb[0::2] = np.sin(arg)
    emb[1::2] = np.cos(arg)
    return emb.astype(np.float32)


# ---------------------------------------------------------------------------
# layers


def layer_norm(h: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = h.mean(axis=-1, keepdims=True)
    centered = h - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / np.sqrt(var + np.float32(eps))
    return normed * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(GELU_C * (x + GELU_K * x * x * x)))


def _attention(h: np.ndarray, p: BlockParams, n_heads: int) -> np.ndarray:
    n, d = h.shape
    hd = d // n_heads
    qkv = h @ p.w_qkv
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    # (heads, tokens, head_dim)
    q = q.reshape(n, n_heads, hd).transpose(1, 0, 2)
    k = k.reshape(n, n_heads, hd).transpose(1, 0, 2)
    v = v.reshape(n, n_heads, hd).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) * np.float32(1.0 / math.sqrt(hd))
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    out = (weights @ v).transpose(1, 0, 2).reshape(n, d)
    return out @ p.w_attn_out


def _block(h: np.ndarray, p: BlockParams, cfg: ModelConfig) -> np.ndarray:
    h = h + _attention(layer_norm(h, p.ln1_gain, p.ln1_bias, cfg.ln_epsilon), p, cfg.n_heads)
    mlp = gelu(layer_norm(h, p.ln2_gain, p.ln2_bias, cfg.ln_epsilon) @ p.w_mlp_in) @ p.w_mlp_out
    return (h + mlp).astype(np.float32, copy=False)


def _apply_blocks(w: ModelWeights, h: np.ndarray, start: int, stop: int,
                  record: Iterable[int] = (), meter=None) -> tuple:
    """Apply blocks ``start+1 .. stop`` (1-based) to ``h``.

    Returns the final hidden state and a dict of copies for recorded block ids.
    """
    record = set(record)
    recorded = {}
    for i in range(start, stop):
        h = _block(h, w.blocks[i], w.config)
        if i + 1 in record:
            recorded[i + 1] = h.copy()
    if meter is not None:
        meter.add_blocks(stop - start)
    return h, recorded


def _embed(w: ModelWeights, x: np.ndarray, t: float, c: np.ndarray) -> np.ndarray:
    cfg = w.config
    if x.shape != (cfg.n_tokens, cfg.d_model):
        raise ShapeMismatch(f"latent shape {x.shape} != {(cfg.n_tokens, cfg.d_model)}")
    c = np.asarray(c, dtype=np.float32)
    if c.shape != (cfg.d_model,):
        raise ShapeMismatch(f"condition shape {c.shape} != {(cfg.d_model,)}")
    shift = time_embedding(t, cfg.d_model) @ w.w_time + c @ w.w_cond
    return (x.astype(np.float32, copy=False) + shift[None, :]).astype(np.float32, copy=False)


def _head(w: ModelWeights, h: np.ndarray) -> np.ndarray:
    normed = layer_norm(h, w.final_gain, w.final_bias, w.config.ln_epsilon)
    return (normed @ w.w_out).astype(np.float32, copy=False)


def _check_depth(w: ModelWeights, m: int) -> None:
    if not 1 <= m <= w.num_blocks - 1:
        raise BadProbeDepth(f"probe depth {m} outside [1, {w.num_blocks - 1}]")


def forward_probe(w: ModelWeights, x: np.ndarray, t: float, c: np.ndarray, m: int,
                  meter=None) -> BlockOutputs:
    """Run the input injection and the first ``m`` blocks; charges ``m`` block-evals."""
    _check_depth(w, m)
    h, _ = _apply_blocks(w, _embed(w, x, t, c), 0, m, meter=meter)
    return BlockOutputs(probe_feature=h)


def forward_resume(w: ModelWeights, probe: np.ndarray, m: int, meter=None) -> np.ndarray:
    """Continue from a block-``m`` feature through block ``M`` and the output head."""
    _check_depth(w, m)
    cfg = w.config
    if probe.shape != (cfg.n_tokens, cfg.d_model):
        raise ShapeMismatch(f"probe shape {probe.shape} != {(cfg.n_tokens, cfg.d_model)}")
    h, _ = _apply_blocks(w, probe, m, w.num_blocks, meter=meter)
    return _head(w, h)


def forward_full(w: ModelWeights, x: np.ndarray, t: float, c: np.ndarray,
                 record_layers: Iterable[int] = (), meter=None) -> BlockOutputs:
    record = sorted(set(record_layers))
    for i in record:
        if not 1 <= i <= w.num_blocks:
            raise BadProbeDepth(f"recorded layer {i} outside [1, {w.num_blocks}]")
    h, layers = _apply_blocks(w, _embed(w, x, t, c), 0, w.num_blocks, record, meter=meter)
    out = _head(w, h)
    if w.num_blocks in layers:
        layers[w.num_blocks] = out.copy()
    return BlockOutputs(final_output=out, layers=layers)


def residual(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    check_same_shape(y, x)
    return (y - x).astype(np.float32, copy=False)
