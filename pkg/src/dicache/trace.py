"""Feature traces (DTRC files) and the offline analyses run on them.

DTRC layout, all integers u32 little-endian, all floats IEEE-754 binary32 LE::

    "DTRC" | version=1 | T | M | N | d | n_layers | layer ids (ascending, incl. M)
    | json_len | config echo (UTF-8 JSON)
    then for k = T .. 1:
        k | t (f32) | x_t (N*d f32) | y^i_t (N*d f32) for each recorded layer i

Layer ``M`` stores the model output (velocity). Analyses here are open loop:
they read the vanilla trajectory and never feed decisions back into it.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadSchedule, DegenerateSequence, InvalidLayers, IoFailure, LayerNotRecorded
from .numerics import l1_rel, pearson, spearman
from .sampler import COMPUTE_FIRST, RECOMPUTE, Decision, SamplerConfig, run
from .toydit import ModelWeights, forward_full

DTRC_MAGIC = b"DTRC"
DTRC_VERSION = 1


@dataclass
class TraceHeader:
    num_steps: int
    num_blocks: int
    n_tokens: int
    d_model: int
    layers: tuple
    config: dict = field(default_factory=dict)

    def encode(self) -> bytes:
        echo = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [
            DTRC_MAGIC,
            struct.pack("<IIIIII", DTRC_VERSION, self.num_steps, self.num_blocks,
                        self.n_tokens, self.d_model, len(self.layers)),
            struct.pack(f"<{len(self.layers)}I", *self.layers),
            struct.pack("<I", len(echo)),
            echo,
        ]
        return b"".join(parts)

    @property
    def record_size(self) -> int:
        return 8 + 4 * self.n_tokens * self.d_model * (1 + len(self.layers))


@dataclass
class Trace:
    header: TraceHeader
    steps: np.ndarray   # step indices, T .. 1
    times: np.ndarray   # float32
    x: np.ndarray       # (T, N, d)
    features: dict      # layer -> (T, N, d); row j is step steps[j]

    def row(self, k: int) -> int:
        return self.header.num_steps - k


def validate_layers(layers, num_blocks: int) -> tuple:
    layers = tuple(int(i) for i in layers)
    if not layers:
        raise InvalidLayers("no layers requested")
    if any(b <= a for a, b in zip(layers, layers[1:])):
        raise InvalidLayers(f"layer ids must be strictly ascending: {layers}")
    if layers[0] < 1 or layers[-1] > num_blocks:
        raise InvalidLayers(f"layer ids must lie in [1, {num_blocks}]: {layers}")
    if layers[-1] != num_blocks:
        raise InvalidLayers(f"layer {num_blocks} (model output) must be recorded")
    return layers


def record_trace(model: ModelWeights, sampler_cfg: SamplerConfig, c, recorded_layers,
                 out_path, config_echo: Optional[dict] = None) -> TraceHeader:
    """Run vanilla sampling and write every step's input and recorded features."""
    layers = validate_layers(recorded_layers, model.num_blocks)
    mc = model.config
    header = TraceHeader(sampler_cfg.num_steps, mc.num_blocks, mc.n_tokens, mc.d_model,
                         layers, dict(config_echo or {}))
    recorder = VanillaRecorder(model, layers)
    run(sampler_cfg, recorder, c)

    chunks = [header.encode()]
    for k, t, x, feats in recorder.records:
        chunks.append(struct.pack("<If", k, t))
        chunks.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
        for i in layers:
            chunks.append(np.ascontiguousarray(feats[i], dtype="<f4").tobytes())
    try:
        Path(out_path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write {out_path}: {exc}") from exc
    return header


def load_trace(path) -> Trace:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_trace(blob)


def decode_trace(blob: bytes) -> Trace:
    try:
        if blob[:4] != DTRC_MAGIC:
            raise IoFailure("not a DTRC file (bad magic)")
        version, T, M, N, d, n_layers = struct.unpack_from("<IIIIII", blob, 4)
        if version != DTRC_VERSION:
            raise IoFailure(f"unsupported DTRC version {version}")
        off = 28
        layers = struct.unpack_from(f"<{n_layers}I", blob, off)
        off += 4 * n_layers
        (echo_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        config = json.loads(blob[off:off + echo_len].decode("utf-8"))
        off += echo_len
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoFailure(f"corrupt DTRC header: {exc}") from exc

    header = TraceHeader(T, M, N, d, tuple(layers), config)
    validate_layers(header.layers, M)
    if len(blob) != off + T * header.record_size:
        raise IoFailure(f"DTRC size {len(blob)} != expected {off + T * header.record_size}")

    rec_dtype = np.dtype([("k", "<u4"), ("t", "<f4"), ("data", "<f4", (1 + n_layers, N, d))])
    recs = np.frombuffer(blob, dtype=rec_dtype, count=T, offset=off)
    steps = recs["k"].astype(np.int64)
    if not np.array_equal(steps, np.arange(T, 0, -1)):
        raise IoFailure("DTRC step records are not T..1 without gaps")
    data = recs["data"].astype(np.float32)
    features = {i: data[:, j + 1] for j, i in enumerate(header.layers)}
    return Trace(header, steps, recs["t"].astype(np.float32), data[:, 0], features)


class VanillaRecorder:
    """Vanilla provider that keeps every step's input and recorded features."""

    def __init__(self, model: ModelWeights, layers):
        self.model = model
        self.layers = tuple(layers)
        self.records = []

    def prepare(self, cfg: SamplerConfig) -> SamplerConfig:
        self.records = []
        return cfg

    def __call__(self, latent, c, meter, num_steps):
        out = forward_full(self.model, latent.x, latent.t, c, self.layers, meter=meter)
        self.records.append((latent.k, latent.t, latent.x.copy(), out.layers))
        action = COMPUTE_FIRST if latent.k == num_steps else RECOMPUTE
        return out.final_output, Decision(action)


# ---------------------------------------------------------------------------
# analyses


def difference_series(trace: Trace, layer: int) -> list:
    """``l1_rel(y_k, y_{k+1})`` for k = T-1 .. 1 (sampling order)."""
    if layer not in trace.features:
        raise LayerNotRecorded(f"layer {layer} not in trace (have {trace.header.layers})")
    feats = trace.features[layer]
    return [l1_rel(feats[j], feats[j - 1]) for j in range(1, len(feats))]


def layer_correlation(trace: Trace) -> dict:
    """Spearman correlation of each layer's step-difference series with the output's."""
    if trace.header.num_steps < 3:
        raise DegenerateSequence("need at least 3 steps for a correlation")
    M = trace.header.num_blocks
    series = {i: difference_series(trace, i) for i in trace.header.layers}
    return {
        "num_steps": trace.header.num_steps,
        "num_blocks": M,
        "steps": [int(k) for k in trace.steps[1:]],
        "layers": [
            {"layer": i, "spearman": spearman(series[i], series[M]), "differences": series[i]}
            for i in trace.header.layers
        ],
    }


def _ratio_gamma(now, newest, previous) -> float:
    den = l1_rel(newest, previous)
    return 1.0 if den == 0.0 else l1_rel(now, previous) / den


def normalize_schedule(trace: Trace, schedule) -> list:
    """Distinct valid step indices in sampling order (descending)."""
    T = trace.header.num_steps
    sched = [int(k) for k in schedule]
    if len(sched) < 2:
        raise BadSchedule("schedule needs at least two recompute steps")
    if len(set(sched)) != len(sched):
        raise BadSchedule(f"duplicate steps in schedule {sched}")
    if any(not 1 <= k <= T for k in sched):
        raise BadSchedule(f"schedule steps must lie in [1, {T}]")
    return sorted(sched, reverse=True)


def gamma_consistency(trace: Trace, recompute_schedule) -> dict:
    """Full-residual trajectory parameter versus its per-layer probe estimate.

    For each consecutive pair of scheduled steps (older ``beta``, newer
    ``alpha``) the report holds the two endpoints (gamma 0 and 1 by
    construction) and every later step that would reuse that pair, up to the
    next scheduled step. Correlations use only the non-endpoint rows.
    """
    sched = normalize_schedule(trace, recompute_schedule)
    M = trace.header.num_blocks
    layers = trace.header.layers
    res = {i: trace.features[i] - trace.x for i in layers}

    rows = []
    for j in range(len(sched) - 1):
        beta, alpha = sched[j], sched[j + 1]
        stop = sched[j + 2] if j + 2 < len(sched) else 0
        points = [(beta, "older"), (alpha, "newer")]
        points += [(k, "query") for k in range(alpha - 1, stop, -1)]
        ra, rb = trace.row(alpha), trace.row(beta)
        for k, kind in points:
            rk = trace.row(k)
            g = {i: _ratio_gamma(res[i][rk], res[i][ra], res[i][rb]) for i in layers}
            rows.append({"step": k, "kind": kind, "newer": alpha, "older": beta,
                         "gamma": g[M], "gamma_hat": {str(i): g[i] for i in layers}})

    summary = []
    queries = [r for r in rows if r["kind"] == "query"]
    for i in layers:
        entry = {"layer": i, "spearman": None, "pearson": None}
        if len(queries) >= 2:
            gm = [r["gamma"] for r in queries]
            gi = [r["gamma_hat"][str(i)] for r in queries]
            try:
                entry["spearman"] = spearman(gi, gm)
                entry["pearson"] = pearson(gi, gm)
            except DegenerateSequence:
                pass
        summary.append(entry)
    return {"schedule": sched, "rows": rows, "summary": summary}


def replay_schedule(trace: Trace, delta: float, m: int) -> dict:
    """Open-loop accumulator over the recorded probe series at layer ``m``."""
    if m not in trace.features:
        raise LayerNotRecorded(f"layer {m} not in trace (have {trace.header.layers})")
    if not delta >= 0:
        raise BadSchedule(f"delta must be >= 0, got {delta}")
    T = trace.header.num_steps
    eps_series = difference_series(trace, m)
    recompute = [T]
    steps = [{"step": T, "action": "ComputeFirst", "estimated_error": 0.0,
              "accumulated_error": 0.0, "accumulated_error_after": 0.0}]
    acc = 0.0
    for k, eps in zip(range(T - 1, 0, -1), eps_series):
        acc += eps
        if acc <= delta:
            steps.append({"step": k, "action": "Reuse", "estimated_error": eps,
                          "accumulated_error": acc, "accumulated_error_after": acc})
        else:
            steps.append({"step": k, "action": "Recompute", "estimated_error": eps,
                          "accumulated_error": acc, "accumulated_error_after": 0.0})
            recompute.append(k)
            acc = 0.0
    M = trace.header.num_blocks
    return {
        "delta": delta,
        "probe_depth": m,
        "recompute_steps": recompute,
        "recompute_count": len(recompute),
        "block_evals": M + (T - 1) * m + (len(recompute) - 1) * (M - m),
        "steps": steps,
    }
