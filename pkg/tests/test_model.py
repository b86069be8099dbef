"""Backbone contracts: modulation, block algebra, mode equivalence."""

import dataclasses

import numpy as np
import pytest

from portraitflow.alignment import block_mask, segment_audio
from portraitflow.encoders import EncoderConfig
from portraitflow.model import (
    ConditioningBundle,
    DiTConfig,
    cross_attention_increments,
    dit_block,
    init_model_params,
    model_forward,
    param_count,
    sinusoidal_features,
    timestep_embedding,
)
from portraitflow.numerics import RngState, Tensor, attention, grad_check

TINY_ENC = EncoderConfig(frames=4, height=16, width=16, patch=8,
                         tokens_per_frame=2, samples_per_token=8,
                         audio_width=8, crop_row=0, crop_col=0, crop_size=16,
                         id_feat_width=8)
TINY = DiTConfig.for_encoders(TINY_ENC, depth=2, width=16, heads=2, head_dim=8,
                              n_id=2)


def make_bundle(config: DiTConfig, params, seed=0, mode="clip", batch=2):
    rng = np.random.default_rng(seed)
    return ConditioningBundle(
        audio=Tensor(rng.standard_normal((batch, config.audio_tokens,
                                          config.audio_width))),
        identity=Tensor(rng.standard_normal((batch, config.n_id, config.width)) * 0.2),
        motion=Tensor(rng.random((batch, 2))),
        reference=Tensor(rng.standard_normal((batch, config.video_tokens,
                                              config.ref_channels)) * 0.2),
        mode=mode,
        mapping=segment_audio(config.audio_tokens, config.latent_frames),
        null_audio=params["null_audio"],
        null_identity=params["null_identity"])


@pytest.fixture(scope="module")
def tiny_params():
    return init_model_params(TINY, RngState(0))


class TestTimestepEmbedding:
    def test_zero_initialized_heads_emit_zero_modulation(self, tiny_params):
        _, mods = timestep_embedding(0.4, Tensor([0.5, 0.5]), tiny_params, TINY)
        for mod in mods:
            for name in ("shift1", "scale1", "gate1", "shift2", "scale2", "gate2"):
                assert (getattr(mod, name).numpy() == 0.0).all()

    def test_distinct_t_values_give_distinct_embeddings(self, tiny_params):
        grid = np.linspace(0.0, 1.0, 64)
        cond, _ = timestep_embedding(grid, Tensor(np.tile([0.5, 0.5], (64, 1))),
                                     tiny_params, TINY)
        emb = cond.numpy()
        for i in range(len(grid)):
            for j in range(i + 1, len(grid)):
                assert np.abs(emb[i] - emb[j]).max() > 1e-9

    def test_sinusoids_injective_on_grid(self):
        grid = np.linspace(0.0, 1.0, 101)
        feats = sinusoidal_features(grid, 16)
        diffs = np.abs(feats[:, None, :] - feats[None, :, :]).max(axis=-1)
        mask = ~np.eye(len(grid), dtype=bool)
        assert diffs[mask].min() > 1e-9

    def test_motion_changes_modulation_when_embedding_nonzero(self):
        from portraitflow.motion import init_motion_params

        params = init_model_params(TINY, RngState(0))
        # live motion pathway and live modulation heads for sensitivity
        params.update(init_motion_params(TINY.width, RngState(5), zero_final=False))
        rng = np.random.default_rng(6)
        for i in range(TINY.depth):
            params[f"block{i}.mod.w"] = Tensor(
                rng.standard_normal((TINY.width, 6 * TINY.width)) * 0.1,
                requires_grad=True)
        _, mods_a = timestep_embedding(0.3, Tensor([0.1, 0.1]), params, TINY)
        _, mods_b = timestep_embedding(0.3, Tensor([0.9, 0.9]), params, TINY)
        delta = np.abs(mods_a[0].shift1.numpy() - mods_b[0].shift1.numpy()).max()
        assert delta > 1e-6

    def test_out_of_range_t_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            timestep_embedding(1.5, Tensor([0.5, 0.5]), tiny_params, TINY)


class TestDitBlock:
    def test_annihilated_branches_give_exact_identity(self):
        config = dataclasses.replace(TINY, lambda_audio=0.0, lambda_identity=0.0)
        params = init_model_params(config, RngState(0))  # gates zero-init
        bundle = make_bundle(config, params)
        _, mods = timestep_embedding(np.array([0.2, 0.8]), bundle.motion,
                                     params, config)
        z = Tensor(np.random.default_rng(1).standard_normal(
            (2, config.video_tokens, config.width)))
        out = dit_block(z, bundle, mods[0], params, config, 0)
        assert np.array_equal(out.numpy(), z.numpy())

    def test_default_conditioning_weights(self):
        config = DiTConfig()
        assert config.lambda_audio == 1.0
        assert config.lambda_identity == 0.5

    def test_conditioning_is_linear_in_lambda(self, tiny_params):
        # pre-MLP algebra: with zero-init gates the block output is
        # z + la*A + li*B where A, B are the unit-weight increments
        params = tiny_params
        bundle = make_bundle(TINY, params)
        z = Tensor(np.random.default_rng(2).standard_normal(
            (2, TINY.video_tokens, TINY.width)))
        a_inc, i_inc = cross_attention_increments(z, bundle, params, TINY, 0)
        _, mods = timestep_embedding(np.array([0.2, 0.8]), bundle.motion,
                                     params, TINY)
        for la, li in ((0.0, 1.0), (1.0, 0.5), (2.0, 0.25), (0.3, 0.0)):
            config = dataclasses.replace(TINY, lambda_audio=la, lambda_identity=li)
            out = dit_block(z, bundle, mods[0], params, config, 0)
            expected = z.numpy() + la * a_inc.numpy() + li * i_inc.numpy()
            assert np.abs(out.numpy() - expected).max() <= 1e-5

    def test_frame_mode_equals_masked_clip_attention(self, tiny_params):
        params = tiny_params
        for seed in range(5):
            bundle = make_bundle(TINY, params, seed=seed, mode="frame")
            z = Tensor(np.random.default_rng(seed).standard_normal(
                (2, TINY.video_tokens, TINY.width)))
            frame_inc, _ = cross_attention_increments(z, bundle, params, TINY, 1)

            # oracle: full-length attention under the block mask
            from portraitflow.model import _merge_heads, _split_heads
            b = "block1."
            q = _split_heads(z @ params[b + "attn.wq"] + params[b + "attn.wq_b"],
                             TINY.heads)
            audio = bundle.audio + params["pos_audio"]
            ak = _split_heads(audio @ params[b + "xa.wk"] + params[b + "xa.wk_b"],
                              TINY.heads)
            av = _split_heads(audio @ params[b + "xa.wv"] + params[b + "xa.wv_b"],
                              TINY.heads)
            mask = block_mask(bundle.mapping, TINY.latent_h, TINY.latent_w)
            att = attention(q, ak, av, mask)
            oracle = _merge_heads(att) @ params[b + "xa.wo"] + params[b + "xa.wo_b"]
            assert np.abs(frame_inc.numpy() - oracle.numpy()).max() <= 1e-5

    def test_null_audio_makes_output_independent_of_audio(self, tiny_params):
        params = tiny_params
        bundle_a = make_bundle(TINY, params, seed=3).with_null_audio()
        bundle_b = make_bundle(TINY, params, seed=4).with_null_audio()
        z = Tensor(np.random.default_rng(5).standard_normal(
            (2, TINY.video_tokens, TINY.width)))
        inc_a, _ = cross_attention_increments(z, bundle_a, params, TINY, 0)
        inc_b, _ = cross_attention_increments(z, bundle_b, params, TINY, 0)
        assert np.array_equal(inc_a.numpy(), inc_b.numpy())


class TestModelForward:
    def test_output_shape_matches_latent_tokens(self, tiny_params):
        bundle = make_bundle(TINY, tiny_params)
        z = Tensor(np.zeros((2, TINY.video_tokens, TINY.latent_width)))
        out = model_forward(z, np.array([0.1, 0.9]), bundle, tiny_params, TINY)
        assert out.shape == (2, TINY.video_tokens, TINY.latent_width)

    def test_unbatched_input_round_trip(self, tiny_params):
        bundle = make_bundle(TINY, tiny_params, batch=1)
        z = Tensor(np.random.default_rng(0).standard_normal(
            (TINY.video_tokens, TINY.latent_width)))
        out = model_forward(z, 0.5, bundle, tiny_params, TINY)
        assert out.shape == (TINY.video_tokens, TINY.latent_width)

    def test_deterministic(self, tiny_params):
        bundle = make_bundle(TINY, tiny_params)
        z = Tensor(np.random.default_rng(1).standard_normal(
            (2, TINY.video_tokens, TINY.latent_width)))
        a = model_forward(z, np.array([0.3, 0.6]), bundle, tiny_params, TINY).numpy()
        b = model_forward(z, np.array([0.3, 0.6]), bundle, tiny_params, TINY).numpy()
        assert np.array_equal(a, b)

    def test_wrong_token_count_rejected(self, tiny_params):
        bundle = make_bundle(TINY, tiny_params)
        z = Tensor(np.zeros((2, 7, TINY.latent_width)))
        with pytest.raises(ValueError, match="tokens"):
            model_forward(z, 0.5, bundle, tiny_params, TINY)

    def test_parameter_count_matches_closed_form(self):
        for config in (TINY, DiTConfig()):
            params = init_model_params(config, RngState(0))
            assert sum(p.size for p in params.values()) == param_count(config)

    def test_end_to_end_gradient_check(self, tiny_params):
        # full model loss vs central differences at f64, sampled coords
        rng = np.random.default_rng(7)
        z = rng.standard_normal((1, TINY.video_tokens, TINY.latent_width))
        target = rng.standard_normal(z.shape)
        audio = rng.standard_normal((1, TINY.audio_tokens, TINY.audio_width))
        identity = rng.standard_normal((1, TINY.n_id, TINY.width)) * 0.2
        reference = rng.standard_normal((1, TINY.video_tokens, TINY.ref_channels)) * 0.2
        omega = rng.random((1, 2))

        def live_params():
            params = init_model_params(TINY, RngState(3))
            from portraitflow.motion import init_motion_params
            params.update(init_motion_params(TINY.width, RngState(4),
                                             zero_final=False))
            gen = np.random.default_rng(8)
            for i in range(TINY.depth):
                for tail in ("mod.w", "xa.wo", "xid.wo"):
                    name = f"block{i}.{tail}"
                    params[name] = Tensor(
                        gen.standard_normal(params[name].shape) * 0.05,
                        requires_grad=True)
            params["out_proj.w"] = Tensor(
                gen.standard_normal(params["out_proj.w"].shape) * 0.05,
                requires_grad=True)
            return params

        def loss_fn(params):
            bundle = ConditioningBundle(
                audio=Tensor(audio), identity=Tensor(identity),
                motion=Tensor(omega), reference=Tensor(reference),
                mode="frame",
                mapping=segment_audio(TINY.audio_tokens, TINY.latent_frames),
                null_audio=params["null_audio"],
                null_identity=params["null_identity"])
            out = model_forward(Tensor(z), np.array([0.35]), bundle, params, TINY)
            return (out - Tensor(target)).square().mean()

        err = grad_check(loss_fn, live_params(), max_coords_per_param=2,
                         rng=RngState(11))
        assert err <= 1e-4
