import dataclasses
import json
import math

import numpy as np
import pytest
from scipy.special import ndtri
from scipy.stats import norm

from metabias.effectsize import Metric, convert_point
from metabias.ensemble import BiasComponent, BiasKind, ModelSpec, WeightFunction, default_model_space
from metabias.inference import (
    FitError,
    IntegrationSettings,
    Partition,
    conditional_effect_estimate,
    fit_ensemble,
    inclusion_bf,
    inflation_curve,
    log_marginal_likelihood,
    publication_probability_curve,
    unadjusted_fit,
)
from tests.conftest import make_estimates, random_estimates


def find_model(space, effect, het, kind, n_free=None):
    for model in space:
        if model.effect is effect and model.heterogeneity is het and model.bias.kind is kind:
            if n_free is not None and model.bias.kind is BiasKind.SELECTION:
                if model.bias.weight_function.n_free != n_free:
                    continue
            return model
    raise AssertionError("model not found")


def conjugate_closed_form(ys, ses, prior_sd=1.0):
    """Evidence, posterior mean and 95% CI of the normal-normal model."""
    ys, ses = np.asarray(ys), np.asarray(ses)
    precision = 1.0 / prior_sd**2 + np.sum(1.0 / ses**2)
    shift = np.sum(ys / ses**2)
    mean = shift / precision
    log_marginal = (
        -0.5 * np.sum(np.log(2 * np.pi * ses**2))
        - 0.5 * math.log(precision * prior_sd**2)
        - 0.5 * np.sum(ys**2 / ses**2)
        + 0.5 * shift**2 / precision
    )
    sd = 1.0 / math.sqrt(precision)
    return log_marginal, mean, mean + sd * ndtri(0.025), mean + sd * ndtri(0.975)


class TestMarginals:
    def test_zero_dimensional_exact(self, fast_settings):
        data = make_estimates([0.2, -0.1, 0.4], [0.2, 0.3, 0.25])
        model = find_model(default_model_space(), False, False, BiasKind.NONE)
        logm, err = log_marginal_likelihood(model, data, fast_settings)
        assert err == 0.0
        assert logm == pytest.approx(sum(norm.logpdf(e.y, 0, e.se) for e in data), abs=1e-14)

    def test_conjugate_model_closed_form(self, fast_settings):
        ys, ses = [0.2, 0.5, 0.3], [1.0, 1.0, 1.0]
        data = make_estimates(ys, ses)
        model = find_model(default_model_space(), True, False, BiasKind.NONE)
        logm, err = log_marginal_likelihood(model, data, fast_settings)
        expected, _, _, _ = conjugate_closed_form(ys, ses)
        assert err == 0.0
        assert logm == pytest.approx(expected, abs=1e-8)

    def test_requires_three_estimates(self, fast_settings):
        model = find_model(default_model_space(), False, False, BiasKind.NONE)
        with pytest.raises(ValueError):
            log_marginal_likelihood(model, make_estimates([0.1, 0.2], [0.1, 0.1]), fast_settings)


class TestConjugateFit:
    def test_posterior_summaries_match_closed_form(self, fast_settings):
        ys, ses = [0.2, 0.5, 0.3], [1.0, 1.0, 1.0]
        data = make_estimates(ys, ses)
        base = find_model(default_model_space(), True, False, BiasKind.NONE)
        space = [dataclasses.replace(base, prior_prob=0.999999999999)]
        fit = fit_ensemble(data, space, fast_settings, orient=False)
        _, mean_z, lo_z, hi_z = conjugate_closed_form(ys, ses)
        expected = [convert_point(v, Metric.FISHER_Z, Metric.COHEN_D) for v in (mean_z, lo_z, hi_z)]
        got = conditional_effect_estimate(fit)
        assert got[0] == pytest.approx(expected[0], abs=1e-8)
        assert got[1] == pytest.approx(expected[1], abs=1e-8)
        assert got[2] == pytest.approx(expected[2], abs=1e-8)

    def test_single_model_space_posterior_one(self, fast_settings):
        data = make_estimates([0.2, 0.5, 0.3], [1.0, 1.0, 1.0])
        base = find_model(default_model_space(), True, False, BiasKind.NONE)
        fit = fit_ensemble(data, [dataclasses.replace(base, prior_prob=0.9999999)], fast_settings)
        assert fit.models[0].posterior_prob == pytest.approx(1.0, abs=1e-15)

    def test_two_identical_models_split_evenly(self, fast_settings):
        data = make_estimates([0.2, 0.5, 0.3], [1.0, 1.0, 1.0])
        base = find_model(default_model_space(), True, False, BiasKind.NONE)
        space = [
            dataclasses.replace(base, prior_prob=0.5, label="twin-a"),
            dataclasses.replace(base, prior_prob=0.5, label="twin-b"),
        ]
        fit = fit_ensemble(data, space, fast_settings)
        assert fit.models[0].posterior_prob == pytest.approx(0.5, abs=1e-12)
        assert fit.models[1].posterior_prob == pytest.approx(0.5, abs=1e-12)


class TestEnsembleConsistency:
    def setup_method(self):
        self.data = random_estimates(5, 12)

    def test_posterior_probs_sum_to_one(self, fast_settings):
        fit = fit_ensemble(self.data, None, fast_settings)
        assert sum(m.posterior_prob for m in fit.models) == pytest.approx(1.0, abs=1e-10)
        assert all(0.0 <= m.posterior_prob <= 1.0 for m in fit.models)
        assert 0.0 <= fit.post_effect <= 1.0
        assert 0.0 <= fit.post_psb <= 1.0

    def test_unadjusted_fit_matches_restricted_full_fit(self, fast_settings):
        full = fit_ensemble(self.data, None, fast_settings)
        unadj = unadjusted_fit(self.data, None, fast_settings)
        assert len(unadj.models) == 4
        # no-bias marginals are the same integrals in both fits
        for mf in unadj.models:
            assert mf.log_marginal == full.model_by_label(mf.label).log_marginal
        # inclusion BF from the restricted fit equals the one recomputed from
        # the full fit's no-bias marginals
        records = [
            (spec, mf) for spec, mf in zip(full._space, full.models) if mf.bias_kind == "none"
        ]
        lw = [mf.log_marginal + math.log(spec.prior_prob) for spec, mf in records]
        masks = [spec.effect for spec, _ in records]
        from scipy.special import logsumexp

        log_bf = (
            logsumexp([v for v, m in zip(lw, masks) if m])
            - logsumexp([v for v, m in zip(lw, masks) if not m])
            - math.log(sum(s.prior_prob for s, _ in records if s.effect))
            + math.log(sum(s.prior_prob for s, _ in records if not s.effect))
        )
        assert unadj.log_bf_effect == pytest.approx(log_bf, abs=1e-10)

    def test_determinism_bit_identical(self, fast_settings):
        a = fit_ensemble(self.data, None, fast_settings)
        b = fit_ensemble(self.data, None, fast_settings)
        assert json.dumps(a.to_json_dict(), sort_keys=True) == json.dumps(
            b.to_json_dict(), sort_keys=True
        )

    def test_seed_changes_sampled_marginals(self):
        s1 = IntegrationSettings(seed=1, quadrature_nodes=24, is_samples=1500)
        s2 = IntegrationSettings(seed=2, quadrature_nodes=24, is_samples=1500)
        a = fit_ensemble(self.data, None, s1)
        b = fit_ensemble(self.data, None, s2)
        sampled = [m.label for m in a.models if m.mc_error > 0]
        assert sampled
        assert any(
            a.model_by_label(label).log_marginal != b.model_by_label(label).log_marginal
            for label in sampled
        )

    def test_mc_error_only_on_sampled_models(self, fast_settings):
        # only selection models keep the mean effect in the integration space;
        # everything else is deterministic (exact or quadrature)
        fit = fit_ensemble(self.data, None, fast_settings)
        for spec, mf in zip(fit._space, fit.models):
            if spec.bias.kind is BiasKind.SELECTION and spec.n_free >= 3:
                assert mf.mc_error > 0.0
            else:
                assert mf.mc_error == 0.0

    def test_flip_on_negative_pooled_effect(self, fast_settings):
        flipped_data = make_estimates([-0.4, -0.3, -0.5, -0.35], [0.1, 0.12, 0.15, 0.1])
        fit = fit_ensemble(flipped_data, None, fast_settings)
        assert fit.flipped
        mean_d, lo_d, hi_d = fit.mu_conditional
        assert mean_d < 0
        assert lo_d < hi_d
        # mirrored data gives the mirrored estimate
        mirrored = make_estimates([0.4, 0.3, 0.5, 0.35], [0.1, 0.12, 0.15, 0.1])
        fit2 = fit_ensemble(mirrored, None, fast_settings)
        assert fit2.mu_conditional[0] == pytest.approx(-mean_d, abs=1e-12)
        assert fit2.mu_conditional[1] == pytest.approx(-hi_d, abs=1e-12)
        assert fit2.mu_conditional[2] == pytest.approx(-lo_d, abs=1e-12)

    def test_symmetric_data_two_sided_space_centers_at_zero(self, fast_settings):
        # deterministic-path models only, so the symmetry is not blurred by
        # Monte Carlo noise
        data = make_estimates([-0.3, 0.3, -0.1, 0.1], [0.2, 0.2, 0.2, 0.2])
        space = default_model_space()
        sub = [
            m for m in space
            if not m.heterogeneity
            and (
                m.bias.kind is BiasKind.NONE
                or (
                    m.bias.kind is BiasKind.SELECTION
                    and m.bias.weight_function.sides == "two"
                    and m.bias.weight_function.n_free == 1
                )
            )
        ]
        total = sum(m.prior_prob for m in sub)
        sub = [dataclasses.replace(m, prior_prob=m.prior_prob / total) for m in sub]
        fit = fit_ensemble(data, sub, fast_settings, orient=False)
        assert fit.mu_conditional[0] == pytest.approx(0.0, abs=1e-5)


class TestInclusionBf:
    def test_equal_prior_odds_arithmetic(self, fast_settings):
        data = make_estimates([0.2, 0.5, 0.3], [1.0, 1.0, 1.0])
        fit = fit_ensemble(data, None, fast_settings)
        post = fit.post_effect
        assert inclusion_bf(fit, Partition.EFFECT) == pytest.approx(
            post / (1 - post), rel=1e-9
        )
        assert math.exp(fit.log_bf_effect) == pytest.approx(post / (1 - post), rel=1e-9)

    def test_bf_is_one_when_posterior_equals_prior(self):
        # two-model space with identical structure: posterior == prior
        base = find_model(default_model_space(), True, False, BiasKind.NONE)
        null = find_model(default_model_space(), False, False, BiasKind.NONE)
        space = [
            dataclasses.replace(base, prior_prob=0.5),
            dataclasses.replace(null, prior_prob=0.5),
        ]
        data = make_estimates([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        settings = IntegrationSettings(seed=0, quadrature_nodes=24, is_samples=1500)
        fit = fit_ensemble(data, space, settings, orient=False)
        # with all-zero data the conjugate evidence is analytic:
        # BF10 = sqrt(prior precision / posterior precision)
        expected = math.exp(-0.5 * math.log(1.0 + 3.0))
        assert inclusion_bf(fit, Partition.EFFECT) == pytest.approx(expected, rel=1e-8)

    def test_selection_given_psb(self, fast_settings):
        data = random_estimates(5, 12)
        fit = fit_ensemble(data, None, fast_settings)
        sel_mass = sum(
            m.posterior_prob for s, m in zip(fit._space, fit.models)
            if s.bias.kind is BiasKind.SELECTION
        )
        reg_mass = sum(
            m.posterior_prob for s, m in zip(fit._space, fit.models)
            if s.bias.kind in (BiasKind.PET, BiasKind.PEESE)
        )
        # equal within-bias prior shares: BF equals the posterior odds
        assert inclusion_bf(fit, Partition.SELECTION_GIVEN_PSB) == pytest.approx(
            sel_mass / reg_mass, rel=1e-9
        )


class TestCurves:
    def test_no_selection_mass_flat_curve(self, fast_settings):
        data = make_estimates([0.2, 0.5, 0.3], [1.0, 1.0, 1.0])
        unadj = unadjusted_fit(data, None, fast_settings)
        curve = publication_probability_curve(unadj, [0.01, 0.2, 0.7])
        assert np.allclose(curve, 1.0)

    def test_step_curve_from_single_selection_model(self, fast_settings):
        data = random_estimates(8, 10)
        space = default_model_space()
        sel = find_model(space, True, False, BiasKind.SELECTION, n_free=1)
        fit = fit_ensemble(data, [dataclasses.replace(sel, prior_prob=0.999999)], fast_settings)
        omega = fit.models[0].post_omega
        wf = sel.bias.weight_function
        grid = [0.001, 0.2, 0.6, 0.99]
        curve = publication_probability_curve(fit, grid)
        from metabias.ensemble import weight_at

        expected = [weight_at(wf.with_weights((1.0, omega[1])), p) for p in grid]
        assert np.allclose(curve, expected, atol=1e-12)
        assert np.all(curve > 0) and np.all(curve <= 1.0 + 1e-12)

    def test_inflation_zero_without_regression_mass(self, fast_settings):
        data = make_estimates([0.2, 0.5, 0.3], [1.0, 1.0, 1.0])
        unadj = unadjusted_fit(data, None, fast_settings)
        assert np.allclose(inflation_curve(unadj, [0.1, 0.5]), 0.0)

    def test_pure_pet_curve_linear(self, fast_settings):
        data = random_estimates(8, 10)
        pet = find_model(default_model_space(), True, False, BiasKind.PET)
        fit = fit_ensemble(data, [dataclasses.replace(pet, prior_prob=0.999999)], fast_settings)
        slope = fit.models[0].post_coef
        se_grid = np.array([0.1, 0.2, 0.4])
        assert np.allclose(inflation_curve(fit, se_grid), slope * se_grid, atol=1e-12)

    def test_curve_monotone_nonnegative(self, fast_settings):
        data = random_estimates(21, 14)
        fit = fit_ensemble(data, None, fast_settings)
        se_grid = np.linspace(0.05, 1.0, 7)
        curve = inflation_curve(fit, se_grid)
        assert np.all(curve >= 0.0)
        assert np.all(np.diff(curve) >= -1e-15)

    def test_grid_validation(self, fast_settings):
        data = make_estimates([0.2, 0.5, 0.3], [1.0, 1.0, 1.0])
        fit = unadjusted_fit(data, None, fast_settings)
        with pytest.raises(ValueError):
            publication_probability_curve(fit, [0.0, 0.5])
        with pytest.raises(ValueError):
            inflation_curve(fit, [-0.1])


class TestSettingsValidation:
    def test_bounds(self):
        with pytest.raises(ValueError):
            IntegrationSettings(quadrature_nodes=4)
        with pytest.raises(ValueError):
            IntegrationSettings(is_samples=10)
