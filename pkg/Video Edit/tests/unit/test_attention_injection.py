#!/usr/bin/env python3
"""
Unit tests for cross-frame attention, feature caches and injection policies
"""

import math
import os
import sys
from collections import Counter

import pytest
import torch

# Add the project root to the path (two levels up from tests/unit/)
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from src.attention_injection import (
    ALL_LAYERS, DECODER_LAYERS, AttentionControl, ControlMode, FeatureCache, InjectionMode,
    InjectionPolicy, ProjectionWeights, build_control, choose_random_previous, cross_frame_attention,
    format_layers, parse_layers, record,
)
from src.errors import ParameterError, ShapeError, StateError


def _weights(channels: int = 4, seed: int = 0) -> ProjectionWeights:
    generator = torch.Generator().manual_seed(seed)
    return ProjectionWeights(*(torch.randn(channels, channels, generator=generator, dtype=torch.float64)
                               for _ in range(3)))


def _plain_self_attention(f, w):
    q, k, v = f @ w.w_q.T, f @ w.w_k.T, f @ w.w_v.T
    return torch.softmax(q @ k.T / math.sqrt(q.shape[-1]), dim=-1) @ v


def test_single_self_source_is_self_attention():
    w = _weights()
    f = torch.randn(6, 4, dtype=torch.float64)
    assert torch.allclose(cross_frame_attention(f, [f], w), _plain_self_attention(f, w), atol=1e-6)


def test_duplicated_source_leaves_output_unchanged():
    w = _weights()
    f = torch.randn(6, 4, dtype=torch.float64)
    assert torch.allclose(cross_frame_attention(f, [f, f], w), cross_frame_attention(f, [f], w), atol=1e-6)


def test_source_order_does_not_matter():
    w = _weights(seed=5)
    generator = torch.Generator().manual_seed(6)
    f = torch.randn(6, 4, generator=generator, dtype=torch.float64)
    anchor = torch.randn(6, 4, generator=generator, dtype=torch.float64)
    prev = torch.randn(6, 4, generator=generator, dtype=torch.float64)
    forward = cross_frame_attention(f, [anchor, prev], w)
    assert torch.allclose(forward, cross_frame_attention(f, [prev, anchor], w), atol=1e-12)
    assert not torch.allclose(forward, cross_frame_attention(f, [anchor], w), atol=1e-6)


def test_two_sources_against_scalar_oracle():
    w = _weights(seed=3)
    generator = torch.Generator().manual_seed(4)
    f = torch.randn(4, 4, generator=generator, dtype=torch.float64)
    s1 = torch.randn(3, 4, generator=generator, dtype=torch.float64)
    s2 = torch.randn(5, 4, generator=generator, dtype=torch.float64)
    out, probs = cross_frame_attention(f, [s1, s2], w, return_probs=True)
    assert probs.shape == (1, 4, 8)

    kv = torch.cat([s1, s2]).tolist()
    wq, wk, wv = w.w_q.tolist(), w.w_k.tolist(), w.w_v.tolist()

    def project(m, x):
        return [sum(m[r][c] * x[c] for c in range(4)) for r in range(4)]

    keys = [project(wk, x) for x in kv]
    values = [project(wv, x) for x in kv]
    for i, row in enumerate(f.tolist()):
        q = project(wq, row)
        scores = [sum(a * b for a, b in zip(q, k)) / 2.0 for k in keys]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        expected = [sum(wt / total * v[c] for wt, v in zip(weights, values)) for c in range(4)]
        assert out[i].tolist() == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_attention_errors():
    w = _weights()
    f = torch.randn(6, 4)
    with pytest.raises(ParameterError):
        cross_frame_attention(f, [], w)
    with pytest.raises(ShapeError):
        cross_frame_attention(f, [torch.randn(6, 5)], w)
    with pytest.raises(ShapeError):
        cross_frame_attention(torch.randn(2, 6, 4), [torch.randn(1, 6, 4)], w)


def test_parse_layers():
    assert parse_layers("decoder") == DECODER_LAYERS
    assert parse_layers("all") == ALL_LAYERS
    assert parse_layers("7, 13-16") == frozenset({7, 13, 14, 15, 16})
    assert format_layers(parse_layers("8-16")) == "decoder"
    assert format_layers({1, 3}) == "1,3"
    with pytest.raises(ParameterError):
        parse_layers("0,17")
    with pytest.raises(ParameterError):
        parse_layers("eight")


def test_feature_cache_records():
    cache = FeatureCache(frame_index=1)
    record(cache, 10, 8, torch.zeros(1, 4, 8))
    assert len(cache) == 1 and (10, 8) in cache
    with pytest.raises(StateError):
        record(cache, 10, 8, torch.zeros(1, 4, 8))
    with pytest.raises(ShapeError):
        record(cache, 20, 8, torch.zeros(1, 5, 8))
    with pytest.raises(StateError):
        cache.get(30, 8)
    assert cache.missing([10, 20], [8]) == [(20, 8)]
    assert cache.nbytes() == 4 * 8 * 4


def test_control_validation():
    with pytest.raises(ParameterError):
        AttentionControl(ControlMode.INJECT, inject_layers=frozenset({8}))
    with pytest.raises(ParameterError):
        AttentionControl.capture({0})
    control = AttentionControl.capture(DECODER_LAYERS)
    assert control.captures(8) and not control.captures(1)
    assert control.sources_for(8) is None
    assert control.without_capture().mode == ControlMode.VANILLA


def _filled_cache(frame: int, steps, layers) -> FeatureCache:
    cache = FeatureCache(frame)
    for t in steps:
        for layer in layers:
            cache.record(t, layer, torch.full((1, 4, 8), float(frame)))
    return cache


def test_policy_none_is_vanilla():
    policy = InjectionPolicy(InjectionMode.NONE)
    assert build_control(policy, None, None, 10).mode == ControlMode.VANILLA
    assert policy.capture_layers == frozenset()


def test_anchor_frame_only_captures():
    control = build_control(InjectionPolicy(), None, None, 10)
    assert control.mode == ControlMode.CAPTURE
    assert control.capture_layers == DECODER_LAYERS


def test_anchor_plus_prev_lists_two_sources():
    anchor = _filled_cache(1, [10], DECODER_LAYERS)
    prev = _filled_cache(2, [10], DECODER_LAYERS)
    control = build_control(InjectionPolicy(), anchor, prev, 10)
    assert control.mode == ControlMode.INJECT
    for layer in DECODER_LAYERS:
        sources = control.sources_for(layer)
        assert len(sources) == 2
        assert float(sources[0][0, 0, 0]) == 1.0 and float(sources[1][0, 0, 0]) == 2.0
    assert control.sources_for(1) is None


def test_single_source_policies():
    anchor = _filled_cache(1, [10], DECODER_LAYERS)
    prev = _filled_cache(2, [10], DECODER_LAYERS)
    only_anchor = build_control(InjectionPolicy(InjectionMode.ANCHOR_ONLY), anchor, prev, 10)
    only_prev = build_control(InjectionPolicy(InjectionMode.PREV_ONLY), anchor, prev, 10)
    assert float(only_anchor.sources_for(8)[0][0, 0, 0]) == 1.0 and len(only_anchor.sources_for(8)) == 1
    assert float(only_prev.sources_for(8)[0][0, 0, 0]) == 2.0 and len(only_prev.sources_for(8)) == 1


def test_missing_previous_cache():
    anchor = _filled_cache(1, [10], DECODER_LAYERS)
    with pytest.raises(StateError):
        build_control(InjectionPolicy(), anchor, None, 10)


def test_random_previous_is_uniform():
    history = [_filled_cache(f, [10], [8]) for f in range(1, 5)]
    rng = torch.Generator().manual_seed(0)
    counts = Counter(choose_random_previous(history, rng).frame_index for _ in range(1000))
    assert set(counts) == {1, 2, 3, 4}
    assert all(200 <= c <= 300 for c in counts.values())
    with pytest.raises(StateError):
        choose_random_previous([], rng)


def test_policy_validation():
    with pytest.raises(ParameterError):
        InjectionPolicy(anchor_index=0)
    with pytest.raises(ParameterError):
        InjectionPolicy(InjectionMode.ANCHOR_PLUS_PREV, layers=frozenset())
    assert InjectionPolicy(layers="all").layers == ALL_LAYERS


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
