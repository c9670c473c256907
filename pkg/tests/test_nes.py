"""Evolution-strategies estimator, updates, and the training loop."""

import numpy as np
import pytest

from nesvae.errors import ConfigError, NonFiniteFitnessError
from nesvae.diagnostics import plain_params
from nesvae.nes import (
    NesConfig,
    TrainingTrace,
    init_opt_state,
    mirrored_pairs,
    nes_gradient_estimate,
    nes_update,
    standardize_fitnesses,
    train_loop,
)
from nesvae.rng import RngStream, gaussian_sample
from nesvae.structures import categorical_family
from nesvae.vae import build_model


def quadratic(pv):
    return float(pv.values @ pv.values)


def make_cfg(**kwargs):
    base = dict(sigma=0.1, population=100, eta=0.05, iterations=1)
    base.update(kwargs)
    return NesConfig(**base)


class TestMirroredPairs:
    def test_pairs_cancel(self):
        pert = mirrored_pairs(RngStream(1), 7, 20)
        assert (pert.sum(axis=0) == 0).all()
        np.testing.assert_array_equal(pert[0], -pert[1])

    def test_minimal_population(self):
        pert = mirrored_pairs(RngStream(2), 3, 2)
        assert pert.shape == (2, 3)
        np.testing.assert_array_equal(pert[0], -pert[1])

    def test_base_draws_match_streams(self):
        """Pair j reuses the gaussian_sample stream child(j)."""
        rng = RngStream(3, (9,))
        pert = mirrored_pairs(rng, 5, 8)
        for j in range(4):
            np.testing.assert_array_equal(pert[2 * j],
                                          gaussian_sample(rng.child(j), 5))

    def test_odd_population_rejected(self):
        with pytest.raises(ConfigError):
            mirrored_pairs(RngStream(4), 3, 5)
        with pytest.raises(ConfigError):
            make_cfg(population=5, mirrored=True)


class TestStandardization:
    def test_zero_spread_gives_zeros(self):
        assert (standardize_fitnesses(np.full(6, 3.3)) == 0).all()

    def test_affine_invariance(self):
        u = RngStream(5).generator().standard_normal(40)
        base = standardize_fitnesses(u)
        np.testing.assert_allclose(standardize_fitnesses(u + 7.5), base,
                                   atol=1e-12)
        np.testing.assert_allclose(standardize_fitnesses(3.0 * u), base,
                                   atol=1e-12)


class TestGradientEstimate:
    def test_linear_objective_calibrated(self):
        """Mirrored pairs recover a linear function's gradient exactly in
        expectation; at N=10^4 each coordinate is within 5%."""
        a = np.array([3.0, 2.0])
        cfg = make_cfg(sigma=0.3, population=10_000, standardize=False)
        gen = nes_gradient_estimate(lambda pv: float(a @ pv.values),
                                    plain_params([0.5, -0.2]), cfg,
                                    RngStream(50))
        rel = np.abs(gen.gradient_estimate - a) / np.abs(a)
        assert np.max(rel) < 0.05

    def test_quadratic_objective_calibrated(self):
        """g(mu) = |mu|^2 + sigma^2 d has gradient exactly 2 mu."""
        cfg = make_cfg(sigma=0.1, population=20_000, standardize=False)
        gen = nes_gradient_estimate(quadratic, plain_params([1.0, 0.0]),
                                    cfg, RngStream(51))
        assert np.linalg.norm(gen.gradient_estimate - [2.0, 0.0]) < 0.1

    def test_constant_objective_standardized_is_zero(self):
        cfg = make_cfg(standardize=True)
        gen = nes_gradient_estimate(lambda pv: 4.2, plain_params([0.0, 1.0]),
                                    cfg, RngStream(52))
        assert (gen.gradient_estimate == 0).all()

    def test_objective_called_exactly_n_times(self):
        calls = []
        cfg = make_cfg(population=12)

        def objective(pv):
            calls.append(1)
            return 0.5

        nes_gradient_estimate(objective, plain_params([0.0]), cfg,
                              RngStream(53))
        assert len(calls) == 12

    def test_indexed_objective_receives_indices(self):
        seen = []
        cfg = make_cfg(population=6)

        def objective(pv, index):
            seen.append(index)
            return float(index)

        nes_gradient_estimate(objective, plain_params([0.0]), cfg,
                              RngStream(54))
        assert seen == list(range(6))

    def test_non_finite_fitness_names_index(self):
        cfg = make_cfg(population=8, standardize=False)

        def objective(pv, index):
            return np.nan if index == 5 else 1.0

        with pytest.raises(NonFiniteFitnessError) as err:
            nes_gradient_estimate(objective, plain_params([0.0]), cfg,
                                  RngStream(55))
        assert err.value.index == 5

    def test_standardization_invariance_of_estimate(self):
        """Shifting or positively scaling the objective leaves the
        standardized gradient estimate unchanged."""
        cfg = make_cfg(population=64, standardize=True)
        mu = plain_params([0.3, -0.7])
        base = nes_gradient_estimate(quadratic, mu, cfg,
                                     RngStream(56)).gradient_estimate
        shifted = nes_gradient_estimate(lambda pv: quadratic(pv) + 11.0, mu,
                                        cfg, RngStream(56)).gradient_estimate
        scaled = nes_gradient_estimate(lambda pv: 0.25 * quadratic(pv), mu,
                                       cfg, RngStream(56)).gradient_estimate
        np.testing.assert_allclose(shifted, base, atol=1e-12)
        np.testing.assert_allclose(scaled, base, atol=1e-12)

    def test_mirrored_variance_reduction(self):
        """Per-coordinate estimator variance on the quadratic is strictly
        lower with mirroring, measured over 100 generations at equal N."""
        mu = plain_params([1.0, 0.0])
        est_m, est_u = [], []
        for g in range(100):
            cm = make_cfg(population=200, mirrored=True, standardize=False)
            cu = make_cfg(population=200, mirrored=False, standardize=False)
            est_m.append(nes_gradient_estimate(
                quadratic, mu, cm, RngStream(57, (g, 0))).gradient_estimate)
            est_u.append(nes_gradient_estimate(
                quadratic, mu, cu, RngStream(57, (g, 1))).gradient_estimate)
        var_m = np.var(np.array(est_m), axis=0)
        var_u = np.var(np.array(est_u), axis=0)
        assert (var_m < var_u).all()

    def test_threaded_evaluation_identical(self):
        cfg = make_cfg(population=40)
        mu = plain_params([0.5, 0.5, 0.5])
        a = nes_gradient_estimate(quadratic, mu, cfg, RngStream(58))
        b = nes_gradient_estimate(quadratic, mu, cfg, RngStream(58),
                                  threads=4)
        np.testing.assert_array_equal(a.gradient_estimate,
                                      b.gradient_estimate)
        np.testing.assert_array_equal(a.fitnesses, b.fitnesses)


class TestUpdates:
    def test_zero_gradient_keeps_parameters(self):
        cfg = make_cfg()
        mu = plain_params([1.0, 2.0])
        gen = nes_gradient_estimate(lambda pv: 1.0, mu,
                                    make_cfg(standardize=True),
                                    RngStream(59))
        out = nes_update(mu, gen, cfg)
        np.testing.assert_array_equal(out.values, mu.values)

    def test_sgd_unit_step_subtracts_estimate(self):
        cfg = make_cfg(eta=1.0, population=16, standardize=False)
        mu = plain_params([0.2, -0.4])
        gen = nes_gradient_estimate(quadratic, mu, cfg, RngStream(60))
        out = nes_update(mu, gen, cfg)
        np.testing.assert_allclose(out.values,
                                   mu.values - gen.gradient_estimate)

    def test_sgd_descends_smoothed_quadratic(self):
        """Two steps strictly reduce g(mu) = |mu|^2 + sigma^2 d."""
        cfg = make_cfg(sigma=0.1, population=2000, eta=0.05,
                       standardize=False)
        mu = plain_params([1.0, 0.0])

        def g_closed(values):
            return float(values @ values) + cfg.sigma ** 2 * 2

        g0 = g_closed(mu.values)
        for t in range(2):
            gen = nes_gradient_estimate(quadratic, mu, cfg,
                                        RngStream(61, (t,)))
            new = nes_update(mu, gen, cfg)
            assert g_closed(new.values) < g_closed(mu.values)
            mu = new
        assert g_closed(mu.values) < g0

    def test_adam_state_advances(self):
        cfg = make_cfg(optimizer="adam", population=16)
        mu = plain_params([0.2, -0.4])
        state = init_opt_state(cfg, mu.dim)
        gen = nes_gradient_estimate(quadratic, mu, cfg, RngStream(62))
        out = nes_update(mu, gen, cfg, state)
        assert state.step == 1
        assert not np.array_equal(out.values, mu.values)


def toy_model(seed=0, k=4):
    return build_model(categorical_family(k), None, x_dim=3, context_dim=0,
                       hidden=(4,), rng=RngStream(seed))


def toy_inputs(seed=1, num=12, dim=3):
    return RngStream(seed).generator().standard_normal((num, dim))


class TestTrainLoop:
    def test_zero_iterations_keeps_model(self):
        model = toy_model()
        cfg = make_cfg(iterations=0, population=10)
        out, trace = train_loop(model, toy_inputs(), cfg, RngStream(70))
        np.testing.assert_array_equal(out.params.values, model.params.values)
        assert trace.records == []

    def test_fixed_seed_reproducible(self):
        model = toy_model()
        cfg = make_cfg(iterations=4, population=20, batch_size=6)
        out1, tr1 = train_loop(model, toy_inputs(), cfg, RngStream(71))
        out2, tr2 = train_loop(model, toy_inputs(), cfg, RngStream(71))
        np.testing.assert_array_equal(out1.params.values, out2.params.values)
        assert tr1.stable_rows() == tr2.stable_rows()

    def test_thread_count_invariant(self):
        model = toy_model()
        cfg = make_cfg(iterations=3, population=20, batch_size=6)
        out1, tr1 = train_loop(model, toy_inputs(), cfg, RngStream(72),
                               threads=1)
        out4, tr4 = train_loop(model, toy_inputs(), cfg, RngStream(72),
                               threads=4)
        np.testing.assert_array_equal(out1.params.values, out4.params.values)
        assert tr1.stable_rows() == tr4.stable_rows()

    def test_non_finite_abort_names_iteration(self):
        model = toy_model()
        bad = model.with_params(np.full(model.params.dim, np.nan))
        cfg = make_cfg(iterations=2, population=4)
        with pytest.raises(NonFiniteFitnessError) as err:
            train_loop(bad, toy_inputs(), cfg, RngStream(73))
        assert err.value.iteration == 0
        assert err.value.index is not None

    def test_trace_shape_and_metadata(self):
        model = toy_model()
        cfg = make_cfg(iterations=5, population=10, eta=0.03)
        _, trace = train_loop(model, toy_inputs(), cfg, RngStream(74))
        assert [r.iteration for r in trace.records] == [1, 2, 3, 4, 5]
        assert all(r.eta == 0.03 for r in trace.records)
        assert trace.optimizer == "sgd"
        assert all(np.isfinite(r.mean_fitness) for r in trace.records)

    def test_trace_csv_roundtrip(self, tmp_path):
        model = toy_model()
        cfg = make_cfg(iterations=3, population=10)
        _, trace = train_loop(model, toy_inputs(), cfg, RngStream(75))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "iter,mean_fitness,grad_sq_norm,wallclock_ms,eta"
        back = TrainingTrace.from_csv(path)
        assert back.stable_rows() == trace.stable_rows()

    def test_bounded_fitness_respects_cap(self):
        model = toy_model()
        cfg = make_cfg(iterations=2, population=10, bound=1.0)
        _, trace = train_loop(model, toy_inputs(), cfg, RngStream(76))
        assert all(r.mean_fitness <= 1.0 + 1e-12 for r in trace.records)
