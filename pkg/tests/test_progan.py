import hashlib

import numpy as np
import pytest

from progseg.errors import ContractError, ShapeError
from progseg.progan import (Architecture, GrowthState, active_parameters, build_models,
                            discriminator_forward, generator_forward, grow, infer_mask,
                            parameter_count, predict_proba)
from progseg.tensor import Rng, Tensor, upsample_nearest2


def small_arch(**kw):
    kw.setdefault("full_res", 16)
    kw.setdefault("base_res", 4)
    kw.setdefault("widths", (4, 8, 8, 8))
    return Architecture(**kw)


def images(b=3, res=16, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(size=(b, 3, res, res)).astype(np.float32))


def checksums(module):
    return {n: hashlib.sha256(p.data.tobytes()).hexdigest() for n, p in module.named_parameters()}


def encoder_count(g):
    return parameter_count(g.encoder)


class TestArchitecture:
    def test_stage_bookkeeping(self):
        a = Architecture()
        assert a.depth == 6 and a.max_stages == 4
        assert [a.resolution(s) for s in range(1, 5)] == [8, 16, 32, 64]

    def test_widths_must_match_depth(self):
        with pytest.raises(ContractError):
            Architecture(full_res=64, widths=(8, 16))

    def test_power_of_two(self):
        with pytest.raises(ContractError):
            Architecture(full_res=48)


class TestForward:
    def test_generator_shape_and_range_at_each_stage(self):
        m = build_models(small_arch(), Rng(0))
        gs = m.state
        while True:
            out = generator_forward(m.generator, images(), gs)
            assert out.shape == (3, 1, gs.resolution, gs.resolution)
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0
            if gs.stage == m.arch.max_stages:
                break
            gs = grow(m.generator, m.discriminator, gs)
            gs.alpha = 1.0

    def test_discriminator_shape_and_range(self):
        m = build_models(small_arch(), Rng(1))
        gs = m.state
        rng = np.random.default_rng(0)
        for _ in range(m.arch.max_stages):
            r = gs.resolution
            s = discriminator_forward(m.discriminator, None,
                                      Tensor(rng.uniform(size=(4, 1, r, r))), gs)
            assert s.shape == (4, 1)
            assert (s.data > 0).all() and (s.data < 1).all()
            if gs.stage < m.arch.max_stages:
                gs.alpha = 1.0
                gs = grow(m.generator, m.discriminator, gs)
                gs.alpha = 0.5

    def test_wrong_input_resolution(self):
        m = build_models(small_arch(), Rng(0))
        with pytest.raises(ShapeError):
            generator_forward(m.generator, images(res=8), m.state)

    def test_wrong_mask_resolution(self):
        m = build_models(small_arch(), Rng(0))
        with pytest.raises(ShapeError):
            discriminator_forward(m.discriminator, None, Tensor(np.zeros((2, 1, 8, 8))), m.state)

    def test_stage_beyond_built(self):
        m = build_models(small_arch(), Rng(0))
        with pytest.raises(ContractError):
            generator_forward(m.generator, images(), GrowthState(2, 8, 1.0, 0))

    def test_conditional_discriminator_needs_image(self):
        m = build_models(small_arch(discriminator_sees_input=True), Rng(0))
        mask = Tensor(np.zeros((2, 1, 4, 4)))
        with pytest.raises(ShapeError):
            discriminator_forward(m.discriminator, None, mask, m.state)
        s = discriminator_forward(m.discriminator, Tensor(np.zeros((2, 3, 4, 4))), mask, m.state)
        assert s.shape == (2, 1)


class TestGrowth:
    def test_grow_preserves_parameters_and_counts(self):
        m = build_models(small_arch(), Rng(3))
        g, d = m.generator, m.discriminator
        before_g, before_d = checksums(g), checksums(d)
        n_dec, n_blk = len(g.decoder), len(d.blocks)
        enc = encoder_count(g)
        gs = grow(g, d, m.state)
        after_g, after_d = checksums(g), checksums(d)
        assert all(after_g[n] == h for n, h in before_g.items())
        assert all(after_d[n] == h for n, h in before_d.items())
        assert len(g.decoder) == n_dec + 1 and len(d.blocks) == n_blk + 1
        assert len(after_g) > len(before_g) and len(after_d) > len(before_d)
        assert encoder_count(g) == enc
        assert (gs.stage, gs.resolution, gs.alpha, gs.iters_in_stage) == (2, 8, 0.0, 0)

    def test_encoder_count_constant_over_all_stages(self):
        m = build_models(Architecture(), Rng(0))
        counts = [encoder_count(m.generator)]
        gs = m.state
        for _ in range(3):
            gs = grow(m.generator, m.discriminator, gs)
            gs.alpha = 1.0
            counts.append(encoder_count(m.generator))
        assert len(set(counts)) == 1
        assert len(m.generator.encoder) == m.arch.depth

    def test_decoder_and_discriminator_grow_in_lockstep(self):
        m = build_models(small_arch(), Rng(0))
        gs = m.state
        for s in range(1, m.arch.max_stages + 1):
            assert len(m.generator.decoder) == len(m.discriminator.blocks) == \
                m.arch.decoder_depth(s)
            if s < m.arch.max_stages:
                gs = grow(m.generator, m.discriminator, gs)
                gs.alpha = 1.0

    def test_cannot_grow_past_final_stage(self):
        m = build_models(small_arch(full_res=8, widths=(4, 8, 8), base_res=4), Rng(0))
        gs = grow(m.generator, m.discriminator, m.state)
        gs.alpha = 1.0
        with pytest.raises(ContractError):
            grow(m.generator, m.discriminator, gs)

    def test_cannot_grow_while_fading(self):
        m = build_models(small_arch(), Rng(0))
        gs = grow(m.generator, m.discriminator, m.state)
        with pytest.raises(ContractError):
            grow(m.generator, m.discriminator, gs)

    @pytest.mark.parametrize("training", [False, True])
    def test_alpha_zero_equals_upsampled_previous_output(self, training):
        # dropout off so both passes see identical noise
        m = build_models(small_arch(dropout=0.0), Rng(5))
        g, d = m.generator, m.discriminator
        g.train(training)
        x = images(4)
        before = generator_forward(g, x, m.state).data
        gs = grow(g, d, m.state)
        after = generator_forward(g, x, gs).data
        np.testing.assert_array_equal(after, upsample_nearest2(Tensor(before)).data)

    def test_alpha_zero_at_every_later_stage(self):
        m = build_models(small_arch(dropout=0.0), Rng(6))
        g, d = m.generator, m.discriminator
        g.eval()
        x = images(2)
        gs = m.state
        while gs.stage < m.arch.max_stages:
            gs.alpha = 1.0
            prev = generator_forward(g, x, gs).data
            gs = grow(g, d, gs)
            np.testing.assert_array_equal(generator_forward(g, x, gs).data,
                                          upsample_nearest2(Tensor(prev)).data)

    def test_alpha_one_ignores_old_head(self):
        m = build_models(small_arch(dropout=0.0), Rng(7))
        g, d = m.generator, m.discriminator
        g.eval()
        gs = grow(g, d, m.state)
        gs.alpha = 1.0
        x = images(2)
        ref = generator_forward(g, x, gs).data
        g.heads[0].weight.data += 1.0
        g.heads[0].bias.data -= 3.0
        np.testing.assert_array_equal(generator_forward(g, x, gs).data, ref)
        gs.alpha = 0.5
        assert not np.array_equal(generator_forward(g, x, gs).data, ref)

    def test_discriminator_alpha_zero_and_one(self):
        m = build_models(small_arch(), Rng(8))
        g, d = m.generator, m.discriminator
        d.eval()
        mask = Tensor(np.random.default_rng(1).uniform(size=(3, 1, 8, 8)).astype(np.float32))
        gs = grow(g, d, m.state)
        ref0 = discriminator_forward(d, None, mask, gs).data
        # alpha 0: the new from_mask head does not contribute
        d.from_mask[1].weight.data += 1.0
        np.testing.assert_array_equal(discriminator_forward(d, None, mask, gs).data, ref0)
        gs.alpha = 1.0
        ref1 = discriminator_forward(d, None, mask, gs).data
        d.from_mask[0].weight.data += 1.0
        np.testing.assert_array_equal(discriminator_forward(d, None, mask, gs).data, ref1)

    def test_new_layers_draw_from_model_stream(self):
        a = build_models(small_arch(), Rng(11))
        b = build_models(small_arch(), Rng(11))
        generator_forward(b.generator, images(), b.state)  # consumes dropout noise only
        grow(a.generator, a.discriminator, a.state)
        grow(b.generator, b.discriminator, b.state)
        assert checksums(a.generator) == checksums(b.generator)

    def test_active_parameters(self):
        m = build_models(small_arch(), Rng(0))
        gs = grow(m.generator, m.discriminator, m.state)
        gs.alpha = 0.5
        names = {n for n, _ in active_parameters(m.generator, gs, "heads")}
        assert "heads.0.weight" in names and "heads.1.weight" in names
        gs.alpha = 1.0
        names = {n for n, _ in active_parameters(m.generator, gs, "heads")}
        assert "heads.0.weight" not in names and "heads.1.weight" in names
        dnames = {n for n, _ in active_parameters(m.discriminator, gs, "from_mask")}
        assert "from_mask.0.weight" not in dnames and "blocks.0.conv.weight" in dnames


def constant_generator(value):
    m = build_models(small_arch(), Rng(0), with_discriminator=False)
    head = m.generator.heads[0]
    head.weight.data[:] = 0.0
    # mask activation is (tanh(z) + 1) / 2
    head.bias.data[:] = np.arctanh(2 * value - 1)
    return m


class TestInferMask:
    @pytest.mark.parametrize("value,expected", [(0.9, 1), (0.1, 0)])
    def test_constant_head(self, value, expected):
        m = constant_generator(value)
        out = infer_mask(m.generator, images(), m.state)
        assert out.dtype == np.uint8 and out.shape == (3, 4, 4)
        assert (out == expected).all()

    def test_threshold_sweep_monotone(self):
        m = build_models(small_arch(), Rng(2), with_discriminator=False)
        x = images(6)
        counts = [int(infer_mask(m.generator, x, m.state, t).sum())
                  for t in np.linspace(0.0, 1.0, 11)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert counts[0] == 6 * 16

    def test_deterministic_inference_is_repeatable_and_pure(self):
        m = build_models(small_arch(), Rng(3), with_discriminator=False)
        x = images()
        bn = m.generator.decoder[0].bn
        stats = bn.running_mean.copy()
        a = predict_proba(m.generator, x, m.state)
        b = predict_proba(m.generator, x, m.state)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(bn.running_mean, stats)
        assert m.generator.training

    def test_stochastic_inference_uses_dropout(self):
        m = build_models(small_arch(), Rng(4), with_discriminator=False)
        x = images()
        a = predict_proba(m.generator, x, m.state, "stochastic")
        b = predict_proba(m.generator, x, m.state, "stochastic")
        assert not np.array_equal(a, b)

    def test_unknown_mode(self):
        m = build_models(small_arch(), Rng(0), with_discriminator=False)
        with pytest.raises(ContractError):
            predict_proba(m.generator, images(), m.state, "sampled")
