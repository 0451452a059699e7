import math

import numpy as np
import pytest

from progseg.data import Dataset, SceneSpec, synthetic_dataset
from progseg.errors import ContractError, DataError, ShapeError
from progseg.progan import Architecture
from progseg.tensor import Tensor
from progseg.train import (ObjectiveConfig, SampleBatch, Schedule, StageSpec, TrainConfig,
                           architecture_for_mode, discriminator_loss, ema, fit, generator_loss,
                           init_state, run_schedule, stage_start_values, train_step)


def scores(v):
    return Tensor(np.asarray(v, dtype=np.float64).reshape(-1, 1), dtype=np.float64)


class TestLosses:
    def test_discriminator_optimum_is_near_zero(self):
        loss = discriminator_loss(scores([1 - 1e-7] * 4), scores([1e-7] * 4))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)

    def test_discriminator_at_half(self):
        loss = discriminator_loss(scores([0.5] * 3), scores([0.5] * 3))
        assert float(loss.data) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_discriminator_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            r, f = rng.uniform(1e-3, 1 - 1e-3, 8), rng.uniform(1e-3, 1 - 1e-3, 8)
            expected = -sum(math.log(v) for v in r) / 8 - sum(math.log(1 - v) for v in f) / 8
            assert float(discriminator_loss(scores(r), scores(f)).data) == \
                pytest.approx(expected, abs=1e-6)
            assert float(discriminator_loss(scores(r), scores(f)).data) >= 0

    def test_generator_identity_and_closed_forms(self):
        y = Tensor(np.ones((2, 1, 4, 4)))
        cfg = ObjectiveConfig()
        total, adv, l1 = generator_loss(scores([0.5, 0.5]), y, y, cfg)
        assert float(l1.data) == 0.0
        assert float(adv.data) == pytest.approx(math.log(2), abs=1e-12)
        _, _, l1 = generator_loss(None, Tensor(np.zeros((2, 1, 4, 4))), y, cfg)
        assert float(l1.data) == pytest.approx(100.0)

    def test_generator_scalar_oracle_both_modes(self):
        rng = np.random.default_rng(1)
        for mode in ("non_saturating", "minimax"):
            cfg = ObjectiveConfig(lambda_l1=7.5, gan_mode=mode)
            for _ in range(10):
                d = rng.uniform(1e-3, 1 - 1e-3, 4)
                yh = rng.uniform(size=(4, 1, 2, 2))
                y = rng.integers(0, 2, size=(4, 1, 2, 2)).astype(np.float64)
                total, adv, l1 = generator_loss(scores(d), Tensor(yh, dtype=np.float64),
                                                Tensor(y, dtype=np.float64), cfg)
                if mode == "non_saturating":
                    adv_ref = -sum(math.log(v) for v in d) / 4
                else:
                    adv_ref = sum(math.log(1 - v) for v in d) / 4
                l1_ref = 7.5 * sum(abs(a - b) for a, b in zip(y.ravel(), yh.ravel())) / y.size
                assert float(adv.data) == pytest.approx(adv_ref, abs=1e-6)
                assert float(l1.data) == pytest.approx(l1_ref, abs=1e-6)
                assert float(total.data) == pytest.approx(adv_ref + l1_ref, abs=1e-6)

    def test_unet_has_no_adversarial_part(self):
        y = Tensor(np.zeros((2, 1, 2, 2)))
        total, adv, l1 = generator_loss(None, y, y, ObjectiveConfig())
        assert adv is None and total is l1

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            generator_loss(None, Tensor(np.zeros((2, 1, 4, 4))), Tensor(np.zeros((2, 1, 8, 8))),
                           ObjectiveConfig())

    @pytest.mark.parametrize("kw", [{"lambda_l1": -1.0}, {"gan_mode": "wgan"}])
    def test_invalid_objective(self, kw):
        with pytest.raises(ContractError):
            ObjectiveConfig(**kw)


TINY_SPEC = SceneSpec(size=16, buildings=(1, 2), building_size=(3, 6), cars=(0, 2),
                      roads=(0, 1), road_width=(1, 2))


def tiny_arch(**kw):
    return Architecture(full_res=16, base_res=4, widths=(4, 8, 8, 8), **kw)


@pytest.fixture(scope="module")
def tiny_ds():
    return synthetic_dataset(12, TINY_SPEC, seed=1, min_res=4)


def tiny_schedule(iters=(4, 6, 6), fade=(0, 3, 2), batch=4):
    return Schedule([StageSpec(r, i, f) for r, i, f in zip((4, 8, 16), iters, fade)], batch)


def batch_from(ds, res, n=4):
    return SampleBatch(ds.images[:n], ds.masks_at(res)[:n, None].astype(np.float32))


def params(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class TestTrainStep:
    def test_lr_zero_keeps_losses(self, tiny_ds):
        cfg = TrainConfig(mode="gan", lr=0.0)
        arch = architecture_for_mode(tiny_arch(), "gan", tiny_schedule())
        st = init_state(arch, cfg)
        b = batch_from(tiny_ds, 16)
        before = params(st.models.generator), params(st.models.discriminator)
        noise = st.models.generator.noise.get_state()
        r1 = train_step(st, b, cfg)
        st.models.generator.noise.set_state(noise)
        r2 = train_step(st, b, cfg)
        assert (r1.loss_D, r1.loss_G_adv, r1.loss_G_l1) == (r2.loss_D, r2.loss_G_adv, r2.loss_G_l1)
        assert same(before[0], params(st.models.generator))
        assert same(before[1], params(st.models.discriminator))

    def test_discriminator_and_generator_updates_are_isolated(self, tiny_ds, monkeypatch):
        import progseg.train as tr
        cfg = TrainConfig(mode="gan", lr=1e-2)
        st = init_state(architecture_for_mode(tiny_arch(), "gan", tiny_schedule()), cfg)
        g, d = st.models.generator, st.models.discriminator
        snaps = []
        real_step = tr.adam_step

        def spy(named, state):
            snaps.append((state is st.opt_d, params(g), params(d)))
            real_step(named, state)
            snaps.append((state is st.opt_d, params(g), params(d)))

        monkeypatch.setattr(tr, "adam_step", spy)
        train_step(st, batch_from(tiny_ds, 16), cfg)
        (is_d0, g0, d0), (_, g1, d1), (is_d2, g2, d2), (_, g3, d3) = snaps
        assert is_d0 and not is_d2
        assert same(g0, g1) and not same(d0, d1)  # D step: G untouched
        assert same(d2, d3) and not same(g2, g3)  # G step: D untouched

    def test_unet_never_builds_discriminator(self, tiny_ds):
        st, recs = fit(tiny_ds, tiny_arch(), tiny_schedule(), TrainConfig(mode="unet"))
        assert st.models.discriminator is None and st.opt_d is None
        assert all(r.loss_D is None and r.loss_G_adv is None for r in recs)

    def test_batch_guards(self, tiny_ds):
        cfg = TrainConfig(mode="gan")
        st = init_state(architecture_for_mode(tiny_arch(), "gan", tiny_schedule()), cfg)
        with pytest.raises(ContractError):
            train_step(st, batch_from(tiny_ds, 16, n=1), cfg)
        with pytest.raises(ShapeError):
            train_step(st, batch_from(tiny_ds, 8), cfg)

    def test_single_pair_memorization(self):
        # one scene repeated (batch norm needs two rows); 32×32 at lr 2e-3
        spec = SceneSpec(size=32, buildings=(2, 3), building_size=(5, 10))
        ds = synthetic_dataset(1, spec, seed=3, min_res=8)
        arch = Architecture(full_res=32, widths=(8, 16, 32, 32, 32))
        cfg = TrainConfig(mode="gan", lr=2e-3)
        st = init_state(architecture_for_mode(arch, "gan", Schedule.single(32, 1)), cfg)
        b = SampleBatch(np.repeat(ds.images, 2, 0),
                        np.repeat(ds.masks[:, None].astype(np.float32), 2, 0))
        losses = [train_step(st, b, cfg).loss_G_l1 for _ in range(500)]
        assert min(losses[-10:]) < 0.05
        assert losses[-1] < 0.05


class TestSchedule:
    def test_validation(self):
        with pytest.raises(ContractError):
            Schedule([StageSpec(8, 10), StageSpec(32, 10)])
        with pytest.raises(ContractError):
            Schedule([StageSpec(8, 0)])
        with pytest.raises(ContractError):
            Schedule([StageSpec(8, 5, 6)])
        with pytest.raises(ContractError):
            Schedule([StageSpec(8, 5)], batch_size=1)

    def test_progressive_split(self):
        s = Schedule.progressive([8, 16, 32, 64], 6000, 16, 0.5)
        assert [(x.resolution, x.iterations, x.fade_iterations) for x in s.stages] == [
            (8, 1500, 0), (16, 1500, 750), (32, 1500, 750), (64, 1500, 750)]
        assert s.total_iterations == 6000

    def test_transitions_at_configured_counts(self, tiny_ds):
        sched = tiny_schedule((4, 6, 5), (0, 3, 2))
        st, recs = fit(tiny_ds, tiny_arch(), sched, TrainConfig(mode="progressive"))
        assert [r.iteration for r in recs] == list(range(15))
        assert [r.stage for r in recs] == [1] * 4 + [2] * 6 + [3] * 5
        assert [r.resolution for r in recs] == [4] * 4 + [8] * 6 + [16] * 5
        alphas = [r.alpha for r in recs]
        assert alphas[:4] == [1.0] * 4
        assert alphas[4:10] == pytest.approx([0.0, 1 / 3, 2 / 3, 1.0, 1.0, 1.0])
        assert alphas[10:] == pytest.approx([0.0, 0.5, 1.0, 1.0, 1.0])
        assert st.gs.stage == 3 and st.gs.alpha == 1.0

    def test_alpha_non_decreasing_within_stage(self, tiny_ds):
        _, recs = fit(tiny_ds, tiny_arch(), tiny_schedule(), TrainConfig())
        for a, b in zip(recs, recs[1:]):
            if a.stage == b.stage:
                assert b.alpha >= a.alpha

    def test_one_stage_schedule_equals_gan(self, tiny_ds):
        one = Schedule([StageSpec(16, 8, 0)], 4)
        arch = Architecture(full_res=16, base_res=16, widths=(4, 8, 8, 8))
        _, a = fit(tiny_ds, arch, one, TrainConfig(mode="progressive", seed=3))
        _, b = fit(tiny_ds, arch, one, TrainConfig(mode="gan", seed=3))
        assert a == b

    def test_gan_collapses_to_full_resolution(self, tiny_ds):
        st, recs = fit(tiny_ds, tiny_arch(), tiny_schedule(), TrainConfig(mode="gan"))
        assert len(recs) == tiny_schedule().total_iterations
        assert {r.resolution for r in recs} == {16}
        assert len(st.models.generator.decoder) == 4

    def test_identical_seeds_identical_records(self, tiny_ds):
        _, a = fit(tiny_ds, tiny_arch(), tiny_schedule(), TrainConfig(seed=4))
        _, b = fit(tiny_ds, tiny_arch(), tiny_schedule(), TrainConfig(seed=4))
        _, c = fit(tiny_ds, tiny_arch(), tiny_schedule(), TrainConfig(seed=5))
        assert a == b and a != c

    def test_missing_level_is_data_error(self, tiny_ds):
        coarse = Dataset(tiny_ds.images, tiny_ds.masks, min_res=8)
        cfg = TrainConfig()
        st = init_state(architecture_for_mode(tiny_arch(), "progressive", tiny_schedule()), cfg)
        with pytest.raises(DataError):
            run_schedule(st, coarse, tiny_schedule(), cfg)

    def test_log_interval_and_probe(self, tiny_ds):
        cfg = TrainConfig(mode="unet", log_interval=5, probe_interval=4)
        seen = []
        _, recs = fit(tiny_ds, tiny_arch(), tiny_schedule(), cfg, sink=seen.append)
        its = [r.iteration for r in recs]
        assert its == sorted(set(its)) and seen == recs
        assert all(i % 5 == 0 or (i + 1) % 4 == 0 for i in its)
        probed = [r for r in recs if r.train_accuracy is not None]
        assert [r.iteration for r in probed] == [3, 7, 11, 15]
        assert all(0.0 <= r.train_accuracy <= 1.0 for r in probed)


class TestEma:
    def test_constant_series(self):
        np.testing.assert_allclose(ema([2.0] * 50), 2.0)

    def test_recurrence(self):
        out = ema([1.0, 3.0], window=3)
        assert list(out) == [1.0, 0.5 * 3.0 + 0.5 * 1.0]

    def test_stage_start_values(self):
        from progseg.train import TrainRecord
        recs = [TrainRecord(i, 1 + (i >= 3), 8, 1.0, None, None, v)
                for i, v in enumerate([4.0, 4.0, 4.0, 1.0, 1.0])]
        assert stage_start_values(recs, window=1) == [4.0, 1.0]
