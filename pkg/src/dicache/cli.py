"""Command-line entry point: ``dicache <subcommand>``.

Exit codes: 0 success, 2 config error, 3 numeric error, 4 I/O error.
Set ``DICACHE_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .cachepolicy import (
    DiCacheConfig,
    DiCacheProvider,
    StepReductionProvider,
    UniformCacheProvider,
    VanillaProvider,
    expected_block_evals,
)
from .errors import ConfigError, DiCacheError, InvalidConfig, IoFailure, NumericError
from .numerics import SplitMix64, l1_rel, psnr, ssim
from .sampler import RECOMPUTE, SamplerConfig, read_dlat, run, write_dlat
from .toydit import ModelConfig, init_weights
from .trace import (
    gamma_consistency,
    layer_correlation,
    load_trace,
    record_trace,
    replay_schedule,
)

log = logging.getLogger("dicache")

POLICY_KINDS = ("vanilla", "step_reduction", "uniform", "dicache")
DEFAULT_DELTA_GRID = (0.05, 0.08, 0.10, 0.15, 0.20)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    condition_seed: int = 0
    policy: dict = field(default_factory=lambda: {
        "kind": "dicache", **asdict(DiCacheConfig())})
    output: dict = field(default_factory=lambda: {
        "latent": "latent.dlat", "report": "report.json"})

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "sampler": {"num_steps": self.sampler.num_steps, "noise_seed": self.sampler.noise_seed},
            "condition_seed": self.condition_seed,
            "policy": dict(self.policy),
            "output": dict(self.output),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            model = ModelConfig(**data.get("model", {})).validate()
            s = data.get("sampler", {})
            extra = set(s) - {"num_steps", "noise_seed"}
            if extra:
                raise InvalidConfig(f"unknown sampler keys: {sorted(extra)}")
            sampler = SamplerConfig(n_tokens=model.n_tokens, d_model=model.d_model, **s).validate()
            cfg = cls(model=model, sampler=sampler,
                      condition_seed=int(data.get("condition_seed", 0)),
                      policy=dict(data.get("policy", {"kind": "vanilla"})),
                      output=dict(data.get("output", cls().output)))
        except TypeError as exc:
            raise InvalidConfig(f"bad config: {exc}") from exc
        cfg.check_policy()
        return cfg

    def check_policy(self) -> None:
        kind = self.policy.get("kind")
        allowed = {
            "vanilla": set(),
            "step_reduction": {"fraction"},
            "uniform": {"interval"},
            "dicache": {"reuse_threshold", "probe_depth", "dcta_enabled", "gamma_clamp"},
        }
        if kind not in allowed:
            raise InvalidConfig(f"policy kind must be one of {POLICY_KINDS}, got {kind!r}")
        params = set(self.policy) - {"kind"}
        if params - allowed[kind]:
            raise InvalidConfig(f"unexpected {kind} parameters: {sorted(params - allowed[kind])}")
        if kind in ("step_reduction", "uniform") and not params:
            raise InvalidConfig(f"{kind} policy needs {sorted(allowed[kind])[0]}")
        if kind == "dicache":
            self.dicache_config().validate(self.model.num_blocks)

    def dicache_config(self) -> DiCacheConfig:
        p = {k: v for k, v in self.policy.items() if k != "kind"}
        return DiCacheConfig(**p)

    def condition(self) -> np.ndarray:
        return SplitMix64(self.condition_seed).gaussian_array(self.model.d_model).astype(np.float32)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def dump_json(obj, path=None) -> str:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc
    return text


def _jsonable(obj):
    # +/-inf has no JSON literal; written as the strings "inf" / "-inf"
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# building blocks shared by sample / sweep


def make_provider(cfg: RunConfig, weights):
    kind = cfg.policy["kind"]
    if kind == "vanilla":
        return VanillaProvider(weights)
    if kind == "step_reduction":
        return StepReductionProvider(weights, float(cfg.policy["fraction"]))
    if kind == "uniform":
        return UniformCacheProvider(weights, cfg.policy["interval"])
    return DiCacheProvider(weights, cfg.dicache_config())


def policy_block_evals(cfg: RunConfig, report) -> int:
    """Block-eval count recomputed from the decision log alone."""
    M = cfg.model.num_blocks
    n_full = sum(1 for s in report.steps if s.action != "Reuse")
    if cfg.policy["kind"] == "dicache":
        m = cfg.policy.get("probe_depth", DiCacheConfig().probe_depth)
        n_recompute = sum(1 for s in report.steps if s.action == RECOMPUTE)
        return expected_block_evals(M, report.num_steps, m, n_recompute)
    return n_full * M


def quality(latent: np.ndarray, reference: np.ndarray, n_tokens: int) -> dict:
    gh, gw = token_grid(n_tokens)
    return {
        "l1_rel": l1_rel(latent, reference),
        "psnr": psnr(latent, reference),
        "ssim": ssim(latent, reference, gh, gw, window=3 if min(gh, gw) >= 3 else 1),
    }


def token_grid(n_tokens: int) -> tuple:
    """Most square ``h x w`` factorization of the token count."""
    h = int(math.isqrt(n_tokens))
    while n_tokens % h:
        h -= 1
    return h, n_tokens // h


def run_config(cfg: RunConfig, weights=None, reference: Optional[np.ndarray] = None):
    """Sample once; returns ``(latent, report_dict)``."""
    weights = weights if weights is not None else init_weights(cfg.model)
    provider = make_provider(cfg, weights)
    started = time.perf_counter()
    latent, report = run(cfg.sampler, provider, cfg.condition())
    log.info("sampled %s policy in %.3fs (wall clock, informational)",
             cfg.policy["kind"], time.perf_counter() - started)

    T, M = cfg.sampler.num_steps, cfg.model.num_blocks
    recomputed = policy_block_evals(cfg, report)
    if recomputed != report.block_evals:
        raise NumericError(f"cost cross-check failed: meter {report.block_evals} != log {recomputed}")
    out = {
        "config": cfg.to_dict(),
        "totals": {
            "block_evals": report.block_evals,
            "recompute_steps": report.recompute_steps,
            "reuse_steps": report.reuse_steps,
            "effective_steps": report.num_steps,
        },
        "speedup_blockevals": T * M / report.block_evals,
        "steps": [s.to_dict() for s in report.steps],
    }
    if reference is not None:
        out["quality"] = quality(latent, reference, cfg.model.n_tokens)
    return latent, out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_config(args) -> int:
    cfg = RunConfig()
    dump_json(cfg.to_dict(), args.out)
    return 0


def _apply_seed_override(cfg: RunConfig, seed) -> RunConfig:
    if seed is None:
        return cfg
    return replace(cfg, sampler=replace(cfg.sampler, noise_seed=int(seed)))


def cmd_sample(args) -> int:
    cfg = _apply_seed_override(load_config(args.config), args.seed_override)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reference = read_dlat(args.reference) if args.reference else None
    latent, report = run_config(cfg, reference=reference)
    write_dlat(out_dir / cfg.output["latent"], latent)
    dump_json(report, out_dir / cfg.output["report"])
    print(f"block_evals={report['totals']['block_evals']} "
          f"speedup={report['speedup_blockevals']:.3f}")
    return 0


def cmd_compare(args) -> int:
    a = read_dlat(args.a)
    b = read_dlat(args.b)
    gh, gw = parse_grid(args.grid) if args.grid else token_grid(b.shape[0])
    metrics = {
        "l1_rel": l1_rel(a, b),
        "psnr": psnr(a, b),
        "ssim": ssim(a, b, gh, gw, args.window),
        "ssim_reversed": ssim(b, a, gh, gw, args.window),
        "reference": str(args.b),
        "grid": [gh, gw],
    }
    text = dump_json(metrics, args.out)
    sys.stdout.write(text)
    return 0


def parse_grid(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise InvalidConfig(f"grid must look like HxW, got {text!r}") from exc
    return h, w


def parse_layers(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidConfig(f"layers must be a comma list of integers, got {text!r}") from exc


def parse_values(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def cmd_trace(args) -> int:
    cfg = _apply_seed_override(load_config(args.config), args.seed_override)
    M = cfg.model.num_blocks
    layers = parse_layers(args.layers) if args.layers else list(range(1, M + 1))
    weights = init_weights(cfg.model)
    echo = {"model": asdict(cfg.model), "sampler": cfg.to_dict()["sampler"],
            "condition_seed": cfg.condition_seed}
    header = record_trace(weights, cfg.sampler, cfg.condition(), layers, args.out, echo)
    print(f"wrote {args.out}: T={header.num_steps} layers={list(header.layers)}")
    return 0


def cmd_replay(args) -> int:
    trace = load_trace(args.trace)
    m = args.probe_depth
    deltas = [float(v) for v in parse_values(args.values)] if args.values else list(DEFAULT_DELTA_GRID)
    rows = [replay_schedule(trace, d, m) for d in deltas]
    counts = [r["recompute_count"] for r in rows]
    doc = {
        "trace": str(args.trace),
        "probe_depth": m,
        "runs": rows,
        "recompute_counts": counts,
        "monotone": _non_increasing([n for _, n in sorted(zip(deltas, counts))]),
    }
    dump_json(doc, args.out)
    for d, n in zip(deltas, counts):
        print(f"delta={d:g} recomputes={n}")
    return 0


def _non_increasing(seq) -> bool:
    return all(b <= a for a, b in zip(seq, seq[1:]))


def cmd_analyze(args) -> int:
    trace = load_trace(args.trace)
    doc = {"trace": str(args.trace), "correlation": layer_correlation(trace)}
    T = trace.header.num_steps
    schedule = (parse_layers(args.schedule) if args.schedule
                else list(range(T, 0, -args.schedule_interval)))
    if len(schedule) >= 2:
        doc["gamma_consistency"] = gamma_consistency(trace, schedule)
    dump_json(doc, args.out)
    for row in doc["correlation"]["layers"]:
        print(f"layer {row['layer']}: spearman={row['spearman']:.4f}")
    return 0


def _sweep_point(base: RunConfig, axis: str, value: str, weights, reference):
    dc = base.dicache_config()
    if axis == "delta":
        dc = replace(dc, reuse_threshold=float(value))
    elif axis == "m":
        dc = replace(dc, probe_depth=int(value))
    elif axis == "dcta":
        flag = value.lower()
        if flag not in ("on", "off", "true", "false", "1", "0"):
            raise InvalidConfig(f"dcta values must be on/off, got {value!r}")
        dc = replace(dc, dcta_enabled=flag in ("on", "true", "1"))
    else:
        raise InvalidConfig(f"unknown sweep axis {axis!r}")
    cfg = replace(base, policy={"kind": "dicache", **asdict(dc)})
    cfg.check_policy()
    _, report = run_config(cfg, weights=weights, reference=reference)
    q = report["quality"]
    return {
        "value": value,
        "l1_rel": q["l1_rel"],
        "psnr": q["psnr"],
        "ssim": q["ssim"],
        "speedup_blockevals": report["speedup_blockevals"],
        "block_evals": report["totals"]["block_evals"],
        "recompute_steps": report["totals"]["recompute_steps"],
    }


def cmd_sweep(args) -> int:
    base = _apply_seed_override(load_config(args.config), args.seed_override)
    if base.policy.get("kind") != "dicache":
        base = replace(base, policy={"kind": "dicache", **asdict(DiCacheConfig())})
    values = parse_values(args.values)
    if not values:
        raise InvalidConfig("--values is empty")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    weights = init_weights(base.model)
    vanilla = replace(base, policy={"kind": "vanilla"})
    reference, _ = run_config(vanilla, weights=weights)
    write_dlat(out_dir / "reference.dlat", reference)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        rows = list(pool.map(lambda v: _sweep_point(base, args.axis, v, weights, reference), values))
    doc = {"config": base.to_dict(), "axis": args.axis, "rows": rows}
    dump_json(doc, out_dir / "sweep.json")
    for r in rows:
        print(f"{args.axis}={r['value']}: psnr={r['psnr']} ssim={r['ssim']:.4f} "
              f"speedup={r['speedup_blockevals']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dicache", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-config", help="write a default run config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_config)

    p = sub.add_parser("sample", help="sample once and write latent + report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--reference", help="DLAT reference latent for quality metrics")
    p.add_argument("--seed-override", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("compare", help="quality metrics of A against reference B")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--grid", help="token grid as HxW (default: most square)")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("trace", help="record a vanilla feature trace (DTRC)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", help="comma list of block ids; must include M (default: all)")
    p.add_argument("--seed-override", type=int)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("replay", help="open-loop schedule replay over a trace")
    p.add_argument("trace")
    p.add_argument("--values", help="comma list of reuse thresholds")
    p.add_argument("--probe-depth", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("analyze", help="layer correlation and gamma consistency")
    p.add_argument("trace")
    p.add_argument("--schedule", help="comma list of recompute steps for gamma analysis")
    p.add_argument("--schedule-interval", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="closed-loop ablation sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=("delta", "m", "dcta"))
    p.add_argument("--values", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed-override", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("DICACHE_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DiCacheError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IoFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
