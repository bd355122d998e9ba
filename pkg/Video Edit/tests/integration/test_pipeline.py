#!/usr/bin/env python3
"""
Integration tests for inversion, clip editing and the ablation harness on a tiny model
"""

import os
import sys

import pytest
import torch

# Add the project root to the path (two levels up from tests/integration/)
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from src.attention_injection import (
    ALL_LAYERS, DECODER_LAYERS, AttentionControl, ControlMode, FeatureCache, InjectionMode, InjectionPolicy,
)
from src.clip_io import LatentStore, VideoClip
from src.denoiser import make_conditioning
from src.errors import ParameterError, ShapeError
from src.guidance import GuidanceConfig
from src.logging_setup import collect_events
from src.pipeline import (
    EditSession, edit_clip, edit_frame, generate_image, invert_clip, make_variants, run_ablation, sample,
)
from src.synth import moving_shapes_fixture

PROMPT = "blue circle on gray"
CFG = 3.0


def _clip(n_frames: int = 3, seed: int = 0) -> VideoClip:
    return moving_shapes_fixture(seed=seed, resolution=16, n_frames=n_frames)


def _guidance(**kwargs) -> GuidanceConfig:
    return GuidanceConfig(**{"delta": 1.0, "active_steps": 4, **kwargs})


def _single(model, sched, clip, latents, i, prompt=PROMPT):
    cond = make_conditioning(model, prompt, clip.depths[i], CFG)
    return sample(model, latents[i], cond, sched).image


def test_one_frame_clip_matches_single_image_editing(tiny_model, tiny_sched):
    clip = _clip(1)
    latents = invert_clip(clip, tiny_model, tiny_sched)
    assert len(latents) == 1
    edited = edit_clip(clip, PROMPT, InjectionPolicy(), _guidance(), tiny_model, tiny_sched, CFG, latents=latents)
    assert edited.n_frames == 1
    assert torch.allclose(edited.frames[0], _single(tiny_model, tiny_sched, clip, latents, 0), atol=1e-5)


def test_no_injection_no_guidance_is_per_frame_editing(tiny_model, tiny_sched):
    clip = _clip(3)
    latents = invert_clip(clip, tiny_model, tiny_sched)
    edited = edit_clip(clip, PROMPT, InjectionPolicy(InjectionMode.NONE), _guidance(delta=0.0),
                       tiny_model, tiny_sched, CFG, latents=latents)
    for i in range(3):
        assert torch.allclose(edited.frames[i], _single(tiny_model, tiny_sched, clip, latents, i), atol=1e-5)


def test_injection_changes_later_frames(tiny_model, tiny_sched):
    clip = _clip(3)
    latents = invert_clip(clip, tiny_model, tiny_sched)
    plain = edit_clip(clip, PROMPT, InjectionPolicy(InjectionMode.NONE), _guidance(delta=0.0),
                      tiny_model, tiny_sched, CFG, latents=latents)
    injected = edit_clip(clip, PROMPT, InjectionPolicy(), _guidance(delta=0.0),
                         tiny_model, tiny_sched, CFG, latents=latents)
    assert torch.allclose(plain.frames[0], injected.frames[0], atol=1e-5)
    assert not torch.allclose(plain.frames[2], injected.frames[2], atol=1e-5)


def test_later_anchor_is_edited_first(tiny_model, tiny_sched):
    clip = _clip(3)
    latents = invert_clip(clip, tiny_model, tiny_sched)
    with collect_events() as events:
        edited = edit_clip(clip, PROMPT, InjectionPolicy(anchor_index=2), _guidance(),
                           tiny_model, tiny_sched, CFG, latents=latents)
    order = [e["frame"] for e in events.events if e["event"] == "frame_edited"]
    assert order == [2, 1, 3]
    assert events.count("guided_update", frame=2) == 0
    assert torch.allclose(edited.frames[1], _single(tiny_model, tiny_sched, clip, latents, 1), atol=1e-5)


def test_guided_update_count(tiny_model, tiny_sched):
    clip = _clip(3)
    with collect_events() as events:
        edit_clip(clip, PROMPT, InjectionPolicy(), _guidance(active_steps=4), tiny_model, tiny_sched, CFG)
    assert events.count("guided_update") == 4 * 2
    assert events.count("guided_update", frame=1) == 0
    assert events.count("frame_edited") == 3
    assert events.count("inversion_done") == 1


def test_edit_output_contract(tiny_model, tiny_sched):
    clip = _clip(8)
    edited = edit_clip(clip, PROMPT, InjectionPolicy(), _guidance(), tiny_model, tiny_sched, CFG)
    assert edited.frames.shape == clip.frames.shape
    assert edited.depths is clip.depths
    assert edited.source_prompt == clip.source_prompt
    assert edited.flows is None
    assert float(edited.frames.min()) >= 0.0 and float(edited.frames.max()) <= 1.0


@pytest.mark.parametrize("mode", [InjectionMode.ANCHOR_PLUS_PREV, InjectionMode.ANCHOR_PLUS_RANDOM_PREV])
def test_editing_is_deterministic(tiny_model, tiny_sched, mode):
    clip = _clip(4)
    latents = invert_clip(clip, tiny_model, tiny_sched)
    runs = [edit_clip(clip, PROMPT, InjectionPolicy(mode), _guidance(), tiny_model, tiny_sched, CFG,
                      seed=5, latents=latents) for _ in range(2)]
    assert torch.equal(runs[0].frames, runs[1].frames)


def test_edit_input_errors(tiny_model, tiny_sched):
    clip = _clip(3)
    with pytest.raises(ParameterError):
        edit_clip(clip, PROMPT, InjectionPolicy(anchor_index=4), _guidance(), tiny_model, tiny_sched, CFG)
    with pytest.raises(ShapeError):
        edit_clip(moving_shapes_fixture(seed=0, resolution=32, n_frames=2), PROMPT, InjectionPolicy(),
                  _guidance(), tiny_model, tiny_sched, CFG)
    latents = invert_clip(clip, tiny_model, tiny_sched)
    with pytest.raises(ShapeError):
        edit_clip(clip, PROMPT, InjectionPolicy(), _guidance(), tiny_model, tiny_sched, CFG, latents=latents[:2])
    with pytest.raises(ParameterError):
        edit_clip(clip, PROMPT, InjectionPolicy(), GuidanceConfig(active_steps=25), tiny_model, tiny_sched, CFG,
                  latents=latents)


def test_identical_frames_invert_identically(tiny_model, tiny_sched):
    single = _clip(1)
    clip = VideoClip(single.frames.repeat(3, 1, 1, 1), single.depths.repeat(3, 1, 1), single.source_prompt)
    latents = invert_clip(clip, tiny_model, tiny_sched)
    assert torch.equal(latents[0].data, latents[1].data) and torch.equal(latents[1].data, latents[2].data)
    assert [x.frame_index for x in latents] == [1, 2, 3]
    assert all(x.step == int(tiny_sched.timesteps[0]) for x in latents)


def test_latent_store_skips_second_inversion(tiny_model, tiny_sched, tmp_path):
    clip = _clip(2)
    store = LatentStore(tmp_path / "latents")
    with collect_events() as events:
        first = invert_clip(clip, tiny_model, tiny_sched, store=store)
        second = invert_clip(clip, tiny_model, tiny_sched, store=store)
    assert events.count("inversion_done") == 1
    assert len(list(store.root.iterdir())) == 1
    assert all(torch.equal(a.data, b.data) for a, b in zip(first, second))


def test_latent_store_keeps_inversion_scales_apart(tiny_model, tiny_sched, tmp_path):
    clip = _clip(1)
    store = LatentStore(tmp_path / "latents")
    plain = invert_clip(clip, tiny_model, tiny_sched, 1.0, store=store)
    guided = invert_clip(clip, tiny_model, tiny_sched, 3.0, store=store)
    fresh = invert_clip(clip, tiny_model, tiny_sched, 3.0)
    assert (plain[0].data - fresh[0].data).abs().max() > 1e-4
    assert torch.equal(guided[0].data, fresh[0].data)
    assert len(list(store.root.iterdir())) == 2


def _session(model, sched, latents, policy=None, guidance=None) -> EditSession:
    return EditSession(model, sched, PROMPT, policy or InjectionPolicy(), guidance or _guidance(), CFG,
                       inverted=list(latents))


def _edit_next(session, clip, i):
    """edit_frame plus the bookkeeping edit_clip does after each frame"""
    cond = make_conditioning(session.model, PROMPT, clip.depths[i - 1], CFG)
    image, cache, x0s = edit_frame(session, i, session.inverted[i - 1], cond)
    session.prev_features, session.prev_x0 = cache, x0s
    session.history.append(cache)
    session.frames_edited += 1
    return image, cache


def _rerun(session, clip, i):
    cond = make_conditioning(session.model, PROMPT, clip.depths[i - 1], CFG)
    return edit_frame(session, i, session.inverted[i - 1], cond)[0]


def _shifted(cache: FeatureCache, amount: float) -> FeatureCache:
    copy = FeatureCache(cache.frame_index)
    for (t, layer), features in cache.entries.items():
        copy.record(t, layer, features + amount)
    return copy


def test_each_frame_reads_only_anchor_and_previous_caches(tiny_model, tiny_sched):
    clip = _clip(4)
    session = _session(tiny_model, tiny_sched, invert_clip(clip, tiny_model, tiny_sched))
    for i in (1, 2, 3):
        _edit_next(session, clip, i)
    baseline = _rerun(session, clip, 4)

    # frame 2 is neither the anchor nor frame 4's predecessor
    stale = session.history[1]
    assert stale.frame_index == 2
    for key in list(stale.entries):
        stale.entries[key] = stale.entries[key] + 5.0
    assert torch.equal(_rerun(session, clip, 4), baseline)

    session.prev_features = _shifted(session.prev_features, 0.5)
    assert not torch.allclose(_rerun(session, clip, 4), baseline, atol=1e-6)


def test_anchor_cache_is_stable_across_frames(tiny_model, tiny_sched):
    clip = _clip(4)
    session = _session(tiny_model, tiny_sched, invert_clip(clip, tiny_model, tiny_sched))
    _, anchor = _edit_next(session, clip, 1)
    snapshot = {key: f.clone() for key, f in anchor.entries.items()}
    for i in (2, 3, 4):
        _edit_next(session, clip, i)
        assert session.anchor_features is anchor
    assert anchor.entries.keys() == snapshot.keys()
    assert all(torch.equal(anchor.entries[key], snapshot[key]) for key in snapshot)


@pytest.mark.parametrize("layers", [DECODER_LAYERS, ALL_LAYERS])
def test_frame_caches_cover_every_step_and_layer(tiny_model, tiny_sched, layers):
    clip = _clip(3)
    policy = InjectionPolicy(InjectionMode.ANCHOR_PLUS_PREV, layers=layers)
    session = _session(tiny_model, tiny_sched, invert_clip(clip, tiny_model, tiny_sched), policy)
    steps = tiny_sched.timesteps.tolist()
    for i in (1, 2, 3):
        _, cache = _edit_next(session, clip, i)
        assert cache.missing(steps, layers) == []
        assert len(cache) == len(steps) * len(layers)
        assert cache.layers() == sorted(layers)


def test_static_clip_stays_static(tiny_model, tiny_sched):
    single = _clip(1)
    clip = VideoClip(single.frames.repeat(2, 1, 1, 1), single.depths.repeat(2, 1, 1), single.source_prompt)
    latents = invert_clip(clip, tiny_model, tiny_sched)
    ours = edit_clip(clip, PROMPT, InjectionPolicy(), _guidance(), tiny_model, tiny_sched, CFG, latents=latents)
    per_frame = edit_clip(clip, PROMPT, InjectionPolicy(InjectionMode.NONE), _guidance(delta=0.0),
                          tiny_model, tiny_sched, CFG, latents=latents)
    ours_mad = float((ours.frames[1] - ours.frames[0]).abs().mean())
    per_frame_mad = float((per_frame.frames[1] - per_frame.frames[0]).abs().mean())
    assert per_frame_mad == 0.0
    assert ours_mad < 1e-4


def test_self_injection_reproduces_vanilla_sampling(tiny_model, tiny_sched):
    clip = _clip(1)
    latents = invert_clip(clip, tiny_model, tiny_sched)
    cond = make_conditioning(tiny_model, PROMPT, clip.depths[0], CFG)
    vanilla = sample(tiny_model, latents[0], cond, tiny_sched, lambda s, t: AttentionControl.capture(ALL_LAYERS))
    own = vanilla.features

    def inject_own(step_index, t):
        return AttentionControl(ControlMode.INJECT, inject_layers=ALL_LAYERS,
                                injected_features={layer: [own.get(t, layer)] for layer in ALL_LAYERS})

    injected = sample(tiny_model, latents[0], cond, tiny_sched, inject_own)
    assert float((vanilla.image - injected.image).abs().max()) < 1e-5


def test_generate_image_is_seeded(tiny_model, tiny_sched):
    depth = torch.full((16, 16), 0.5)
    a = generate_image(tiny_model, "red square", depth, tiny_sched, 3.0, seed=1)
    b = generate_image(tiny_model, "red square", depth, tiny_sched, 3.0, seed=1)
    assert a.shape == (3, 16, 16) and torch.equal(a, b)


def test_ablation_rows(tiny_model, tiny_sched):
    clip = _clip(3)
    variants = make_variants(["ours", "ours_wo_update", "per_frame"], _guidance())
    reports = run_ablation(clip, PROMPT, variants, tiny_model, tiny_sched, CFG)
    assert [r.variant for r in reports] == ["ours", "ours_wo_update", "per_frame"]
    assert all(r.n_frames == 3 and r.resolution == (16, 16) for r in reports)
    assert all(r.prompt_fidelity is None for r in reports)

    parallel = run_ablation(clip, PROMPT, variants, tiny_model, tiny_sched, CFG, max_workers=2)
    assert [r.pixel_mse for r in parallel] == pytest.approx([r.pixel_mse for r in reports])


def test_ablation_variant_errors(tiny_model, tiny_sched):
    with pytest.raises(ParameterError):
        make_variants(["ours", "magic"])
    with pytest.raises(ParameterError):
        run_ablation(_clip(2), PROMPT, [], tiny_model, tiny_sched)


@pytest.mark.parametrize("workers", [1, 2])
def test_ablation_rejects_repeated_variant_names(tiny_model, tiny_sched, workers):
    variants = make_variants(["ours", "per_frame", "ours"], _guidance())
    with collect_events() as events:
        with pytest.raises(ParameterError, match="ours"):
            run_ablation(_clip(2), PROMPT, variants, tiny_model, tiny_sched, CFG, max_workers=workers)
    assert events.count("inversion_done") == 0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
