import statistics

import numpy as np
import pytest

from dicache.errors import BadSchedule, InvalidLayers, IoFailure, LayerNotRecorded
from dicache.numerics import l1_rel
from dicache.trace import (
    Trace,
    TraceHeader,
    decode_trace,
    gamma_consistency,
    layer_correlation,
    load_trace,
    record_trace,
    replay_schedule,
)
from dicache.toydit import forward_full
from dicache.sampler import init_noise

from .conftest import SMALL, condition, sampler_for
from .test_numerics import brute_ranks

T = 12
LAYERS = (1, 2, 4)


@pytest.fixture(scope="module")
def trace_file(tmp_path_factory, small_weights):
    path = tmp_path_factory.mktemp("trace") / "small.dtrc"
    record_trace(small_weights, sampler_for(SMALL, num_steps=T), condition(16), LAYERS, path,
                 {"note": "test"})
    return path


@pytest.fixture(scope="module")
def trace(trace_file):
    return load_trace(trace_file)


def test_file_size_and_determinism(trace_file, tmp_path, small_weights):
    blob = trace_file.read_bytes()
    header_len = 4 + 4 * 6 + 4 * len(LAYERS) + 4 + len(b'{"note":"test"}')
    n, d = SMALL.n_tokens, SMALL.d_model
    assert len(blob) == header_len + T * (4 + 4 + 4 * n * d * (1 + len(LAYERS)))
    again = tmp_path / "again.dtrc"
    record_trace(small_weights, sampler_for(SMALL, num_steps=T), condition(16), LAYERS, again,
                 {"note": "test"})
    assert again.read_bytes() == blob


def test_round_trip_bit_exact(trace, small_weights):
    cfg = sampler_for(SMALL, num_steps=T)
    x = init_noise(cfg).x
    assert trace.x[0].tobytes() == x.tobytes()
    out = forward_full(small_weights, x, 1.0, condition(16), record_layers=LAYERS)
    for i in LAYERS:
        assert trace.features[i][0].tobytes() == out.layers[i].tobytes()
    assert trace.features[4][0].tobytes() == out.final_output.tobytes()
    assert trace.steps.tolist() == list(range(T, 0, -1))
    assert trace.times[0] == np.float32(1.0) and trace.times[-1] == np.float32(1 / T)
    assert trace.header.config == {"note": "test"}


def test_invalid_layers(small_weights, tmp_path):
    cfg = sampler_for(SMALL, num_steps=3)
    for layers in [(1, 2), (2, 1, 4), (0, 4), (1, 5)]:
        with pytest.raises(InvalidLayers):
            record_trace(small_weights, cfg, condition(16), layers, tmp_path / "x.dtrc")


def test_corrupt_files(trace_file):
    blob = trace_file.read_bytes()
    with pytest.raises(IoFailure):
        decode_trace(b"NOPE" + blob[4:])
    with pytest.raises(IoFailure):
        decode_trace(blob[:-1])
    with pytest.raises(IoFailure):
        load_trace(trace_file.parent / "missing.dtrc")


def test_layer_correlation_self_is_one(trace):
    rep = layer_correlation(trace)
    by_layer = {r["layer"]: r for r in rep["layers"]}
    assert by_layer[4]["spearman"] == 1.0
    assert len(by_layer[1]["differences"]) == T - 1
    for r in rep["layers"]:
        assert -1.0 <= r["spearman"] <= 1.0


def handcrafted_trace(out_scale, probe_scale):
    """Two-layer trace whose step-to-step changes are set by hand."""
    steps = len(out_scale)
    base = np.ones((1, 2), np.float32)
    x = np.zeros((steps, 1, 2), np.float32)
    feats = {}
    for layer, scales in ((1, probe_scale), (2, out_scale)):
        arr = np.empty((steps, 1, 2), np.float32)
        arr[0] = base
        for j in range(1, steps):
            arr[j] = arr[j - 1] * np.float32(1.0 + scales[j])
        feats[layer] = arr
    header = TraceHeader(steps, 2, 1, 2, (1, 2), {})
    return Trace(header, np.arange(steps, 0, -1), np.zeros(steps, np.float32), x, feats)


def test_layer_correlation_matches_rank_oracle():
    out = [0.0, 0.3, 0.1, 0.5, 0.2, 0.4]
    probe = [0.0, 0.2, 0.2, 0.6, 0.1, 0.3]
    rep = layer_correlation(handcrafted_trace(out, probe))
    tr = handcrafted_trace(out, probe)
    s1 = [l1_rel(tr.features[1][j], tr.features[1][j - 1]) for j in range(1, 6)]
    s2 = [l1_rel(tr.features[2][j], tr.features[2][j - 1]) for j in range(1, 6)]
    expected = statistics.correlation(brute_ranks(s1), brute_ranks(s2))
    got = {r["layer"]: r["spearman"] for r in rep["layers"]}
    assert got[1] == pytest.approx(expected, abs=1e-12)
    assert got[2] == 1.0


def test_layer_correlation_monotone_transform():
    out = [0.0, 0.3, 0.1, 0.5, 0.2, 0.4]
    rep = layer_correlation(handcrafted_trace(out, [0.0] + [2 * v for v in out[1:]]))
    assert {r["layer"]: r["spearman"] for r in rep["layers"]}[1] == 1.0


def test_gamma_consistency_identities(trace):
    rep = gamma_consistency(trace, [3, 6, 9, 12])
    assert rep["schedule"] == [12, 9, 6, 3]
    for row in rep["rows"]:
        assert row["gamma_hat"]["4"] == row["gamma"]
        if row["kind"] == "newer":
            assert row["gamma"] == 1.0 and all(v == 1.0 for v in row["gamma_hat"].values())
        if row["kind"] == "older":
            assert row["gamma"] == 0.0 and all(v == 0.0 for v in row["gamma_hat"].values())
    queries = [r["step"] for r in rep["rows"] if r["kind"] == "query"]
    assert queries == [8, 7, 5, 4, 2, 1]
    summary = {s["layer"]: s for s in rep["summary"]}
    assert summary[4]["spearman"] == 1.0


def test_gamma_consistency_bad_schedule(trace):
    for bad in ([12], [12, 12], [0, 5], [5, T + 1]):
        with pytest.raises(BadSchedule):
            gamma_consistency(trace, bad)


def test_replay_examples(trace):
    every = replay_schedule(trace, 0.0, 1)
    assert every["recompute_count"] == T
    total = sum(s["estimated_error"] for s in every["steps"])
    once = replay_schedule(trace, total + 1e-9, 1)
    assert once["recompute_steps"] == [T]
    with pytest.raises(LayerNotRecorded):
        replay_schedule(trace, 0.1, 3)


def test_replay_threshold_semantics(trace):
    for delta in (0.2, 0.5, 1.0):
        rep = replay_schedule(trace, delta, 2)
        for s in rep["steps"][1:]:
            if s["action"] == "Reuse":
                assert s["accumulated_error"] <= delta
            else:
                assert s["accumulated_error"] > delta and s["accumulated_error_after"] == 0.0


def test_replay_monotone_in_delta(trace):
    grid = np.linspace(0.0, 3.0, 40)
    for m in (1, 2):
        runs = [replay_schedule(trace, float(d), m) for d in grid]
        counts = [r["recompute_count"] for r in runs]
        assert all(b <= a for a, b in zip(counts, counts[1:]))
        # the j-th recompute of a larger threshold never precedes the smaller one's
        for small, large in zip(runs, runs[1:]):
            for ks, kl in zip(small["recompute_steps"], large["recompute_steps"]):
                assert kl <= ks
