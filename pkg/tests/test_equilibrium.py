"""Variational objective, maximality checks, zero-temperature limits."""

import math

import numpy as np
import pytest

from distortlab import (
    DecoderSpec,
    decompose_objective,
    enumerate_global,
    enumerate_local,
    kl_objective,
    verify_variational_max,
    zero_temperature_scan,
)
from distortlab.errors import SupportViolation
from distortlab.globalnorm import SequenceDistribution

def measure(entries, reference):
    """A SequenceDistribution carrying an arbitrary measure on sequences."""
    return SequenceDistribution(
        context=reference.context, length=reference.length,
        entries=entries, log_p={}, support_descriptor="test-measure")


class TestKlObjective:
    def test_maximizer_attains_zero(self, catsat, catsat_prompt):
        r = enumerate_global(catsat, catsat_prompt, 2, DecoderSpec("topk", 2))
        assert kl_objective(r, r) == pytest.approx(0.0, abs=1e-12)

    def test_point_mass_scores_log_reference(self, catsat, catsat_prompt):
        r = enumerate_global(catsat, catsat_prompt, 2, DecoderSpec("topk", 2))
        uniform4 = {ids: 0.25 for ids in r.entries}
        ref = measure(uniform4, r)
        element = next(iter(r.entries))
        mu = measure({element: 1.0}, r)
        assert kl_objective(mu, ref) == pytest.approx(math.log(0.25),
                                                      abs=1e-12)

    def test_half_support_uniform(self, catsat, catsat_prompt):
        # -KL(uniform over 2 || uniform over 4) = log 2 - log 4
        r = enumerate_global(catsat, catsat_prompt, 2, DecoderSpec("topk", 2))
        ids = list(r.entries)
        ref = measure({s: 0.25 for s in ids}, r)
        mu = measure({ids[0]: 0.5, ids[1]: 0.5}, r)
        assert kl_objective(mu, ref) == pytest.approx(-math.log(2.0),
                                                      abs=1e-12)

    def test_support_violation(self, catsat, catsat_prompt):
        r = enumerate_global(catsat, catsat_prompt, 2, DecoderSpec("topk", 2))
        mu = measure({(0, 0): 1.0}, r)
        with pytest.raises(SupportViolation):
            kl_objective(mu, r)


class TestDecomposeObjective:
    @pytest.mark.parametrize("label", ["topk:2", "nucleus:0.65", "temp:0.8"])
    def test_decoder_distribution_attains_zero(self, catsat, catsat_prompt,
                                               label):
        spec = DecoderSpec.parse(label)
        q = enumerate_local(catsat, catsat_prompt, 2, spec)
        report = decompose_objective(q, catsat, spec, catsat_prompt, 2)
        assert report.total == pytest.approx(0.0, abs=1e-9)
        assert report.kl_to_q == pytest.approx(0.0, abs=1e-12)
        assert report.total == pytest.approx(
            report.entropy_term + report.quality_term + report.distortion_term,
            abs=1e-12)

    def test_uniform_measure_scores_minus_kl(self, catsat, catsat_prompt):
        spec = DecoderSpec("topk", 2)
        q = enumerate_local(catsat, catsat_prompt, 2, spec)
        uniform = measure({ids: 1.0 / len(q.entries) for ids in q.entries}, q)
        report = decompose_objective(uniform, catsat, spec, catsat_prompt, 2)
        assert report.total == pytest.approx(-report.kl_to_q, abs=1e-9)
        assert report.total < 0.0

    def test_pure_has_no_distortion_term(self, catsat, catsat_prompt):
        spec = DecoderSpec("pure")
        q = enumerate_local(catsat, catsat_prompt, 2, spec)
        uniform = measure({ids: 1.0 / len(q.entries) for ids in q.entries}, q)
        report = decompose_objective(uniform, catsat, spec, catsat_prompt, 2)
        assert report.distortion_term == 0.0

    def test_temperature_quality_scaled(self, ab_model):
        # quality term carries the 1/tau factor
        prompt = ab_model.encode("^")
        tau = 0.5
        spec = DecoderSpec("temperature", tau)
        q = enumerate_local(ab_model, prompt, 2, spec)
        element = max(q.entries, key=q.entries.get)
        mu = measure({element: 1.0}, q)
        report = decompose_objective(mu, ab_model, spec, prompt, 2)
        assert report.entropy_term == 0.0
        assert report.quality_term == pytest.approx(
            q.log_p[element] / tau, abs=1e-12)

    def test_global_mode_constant_is_log_mass(self, catsat, catsat_prompt):
        # Corollary-5 form: two terms, constant log sum_support p
        spec = DecoderSpec("topk", 2, "global")
        q = enumerate_global(catsat, catsat_prompt, 2, spec)
        report = decompose_objective(q, catsat, spec, catsat_prompt, 2)
        assert report.distortion_term == 0.0
        assert report.total == pytest.approx(math.log(0.26), abs=1e-9)
        assert report.kl_to_q == pytest.approx(0.0, abs=1e-12)

    def test_support_violation(self, catsat, catsat_prompt):
        spec = DecoderSpec("topk", 2)
        q = enumerate_local(catsat, catsat_prompt, 2, spec)
        stray = measure({tuple(catsat.encode("a mouse")): 1.0}, q)
        with pytest.raises(SupportViolation):
            decompose_objective(stray, catsat, spec, catsat_prompt, 2)


class TestVerifyVariationalMax:
    @pytest.mark.parametrize("label", ["topk:2", "nucleus:0.65", "temp:0.8"])
    def test_catsat_no_violations(self, catsat, catsat_prompt, label):
        report = verify_variational_max(catsat, DecoderSpec.parse(label),
                                        catsat_prompt, 2,
                                        n_perturbations=100, seed=6)
        assert report["passed"]
        assert report["max_violation_local"] <= 1e-9
        assert report["max_violation_global"] <= 1e-9
        assert abs(report["constant_local"]) <= 1e-9
        assert report["constant_global"] == pytest.approx(
            report["expected_constant_global"], abs=1e-9)

    @pytest.mark.parametrize("label", ["topk:3", "nucleus:0.65", "temp:0.8"])
    def test_char_bigram_no_violations(self, tiny_bigram, label):
        report = verify_variational_max(tiny_bigram, DecoderSpec.parse(label),
                                        tiny_bigram.encode("t"), 3,
                                        n_perturbations=100, seed=7)
        assert report["passed"]

    def test_degenerate_single_sequence_support(self, catsat, catsat_prompt):
        report = verify_variational_max(catsat, DecoderSpec("greedy"),
                                        catsat_prompt, 2,
                                        n_perturbations=10, seed=1)
        assert report["support_size"] == 1
        assert report["passed"]

    def test_gap_strictly_positive_off_maximum(self, catsat, catsat_prompt):
        # uniqueness at finite scale: any mu with KL > 1e-6 scores lower
        spec = DecoderSpec("topk", 2)
        q = enumerate_local(catsat, catsat_prompt, 2, spec)
        rng = np.random.default_rng(5)
        for _ in range(50):
            probs = rng.dirichlet(np.ones(len(q.entries)))
            mu = measure(dict(zip(q.entries, probs)), q)
            report = decompose_objective(mu, catsat, spec, catsat_prompt, 2)
            if report.kl_to_q > 1e-6:
                assert report.total < -1e-7


class TestZeroTemperatureScan:
    def test_ab_limits_differ(self, ab_model):
        scan = zero_temperature_scan(ab_model, ab_model.encode("^"), 2,
                                     [1.0, 0.5, 0.2, 0.1, 0.05])
        assert ab_model.decode(scan["greedy_sequence"]) == "A C"
        assert ab_model.decode(scan["global_argmax"]) == "B C"
        last = scan["rows"][-1]
        assert last["tau"] == 0.05
        assert ab_model.decode(last["local_argmax"]) == "A C"
        assert ab_model.decode(last["global_argmax"]) == "B C"

    def test_ab_exact_global_mass_at_005(self, ab_model):
        # closed form over the four paths: p^20 with p in {.3,.3,.36,.04}
        scan = zero_temperature_scan(ab_model, ab_model.encode("^"), 2, [0.05])
        weights = [0.36 ** 20, 0.3 ** 20, 0.3 ** 20, 0.04 ** 20]
        expected = weights[0] / sum(weights)
        assert scan["rows"][0]["target_mass_global"] == pytest.approx(
            expected, rel=1e-9)
        assert expected == pytest.approx(0.9504184680, abs=1e-9)

    def test_consistent_model_has_identical_limits(self, catsat,
                                                   catsat_prompt):
        scan = zero_temperature_scan(catsat, catsat_prompt, 2,
                                     [1.0, 0.2, 0.05])
        assert scan["greedy_sequence"] == scan["global_argmax"]
        assert scan["converged_tau_local"] == 1.0
        assert scan["converged_tau_global"] == 1.0

    def test_tau_one_matches_chain_argmax(self, ab_model):
        scan = zero_temperature_scan(ab_model, ab_model.encode("^"), 2, [1.0])
        row = scan["rows"][0]
        assert row["local_argmax"] == row["global_argmax"]
        assert row["global_argmax"] == scan["global_argmax"]

    def test_converged_tau_thresholds(self, ab_model):
        scan = zero_temperature_scan(ab_model, ab_model.encode("^"), 2,
                                     [1.0, 0.8, 0.5, 0.2, 0.05])
        assert scan["converged_tau_local"] == 0.5
        assert scan["converged_tau_global"] == 1.0

    def test_global_mass_concentrates_monotonically(self, ab_model):
        scan = zero_temperature_scan(ab_model, ab_model.encode("^"), 2,
                                     [1.0, 0.5, 0.2, 0.1, 0.05])
        masses = [r["target_mass_global"] for r in scan["rows"]]
        assert all(a < b for a, b in zip(masses, masses[1:]))

    def test_extreme_tau_survives_underflow(self, ab_model):
        # step distributions underflow to exact zeros below tau ~ 0.004
        scan = zero_temperature_scan(ab_model, ab_model.encode("^"), 2,
                                     [0.005, 0.002])
        for row in scan["rows"]:
            assert ab_model.decode(row["local_argmax"]) == "A C"
            assert ab_model.decode(row["global_argmax"]) == "B C"
        assert scan["rows"][-1]["target_mass_global"] == pytest.approx(1.0)


def test_corollary5_two_term_dominance(catsat, catsat_prompt, tiny_bigram):
    """H + sum q log p is never lower for the global variant."""
    cases = [(catsat, catsat_prompt, 2), (tiny_bigram, tiny_bigram.encode("t"), 3)]
    for model, prompt, length in cases:
        for label in ("topk:2", "topk:3", "nucleus:0.5", "nucleus:0.8"):
            spec = DecoderSpec.parse(label)
            local = enumerate_local(model, prompt, length, spec)
            glob = enumerate_global(model, prompt, length, spec)

            def two_term(dist):
                total = 0.0
                for ids, prob in dist.entries.items():
                    if prob > 0:
                        total += prob * (dist.log_p[ids] - math.log(prob))
                return total

            assert two_term(glob) >= two_term(local) - 1e-12
