import math
import random

import pytest

from capcal import (
    BackendUnavailable,
    CalibrationConfig,
    ContinuationScore,
    DecodeAborted,
    Permutation,
    PriorMode,
    ScoringRequest,
    SimulatedLM,
    TokenSeq,
    calibrated_scores,
    decode_base,
    decode_capcal,
    joint_identifier_prob,
    render_main_prompt,
    sliding_window_rerank,
    step_entropy,
    validate_permutation,
)
from capcal.prompting import DEFAULT_TEMPLATE

from conftest import make_task, sim_for, softmax
from oracles import naive_greedy_steps, random_sim_task


class PresetBackend:
    """Maps rendered continuation -> list of per-token probabilities."""

    def __init__(self, table):
        self.table = table

    def tokenize_label(self, label, terminator="]"):
        return TokenSeq((label, terminator) if terminator else (label,), label + terminator)

    def score_continuations(self, request):
        out = []
        for seq in request.continuations:
            probs = self.table[seq.rendered]
            pieces = list(seq.tokens)
            while len(pieces) < len(probs):
                head = pieces.pop(0)
                pieces = list(head) + pieces
            out.append(
                ContinuationScore(
                    continuation=TokenSeq(tuple(pieces), seq.rendered),
                    token_logprobs=tuple(math.log(p) for p in probs),
                )
            )
        return out


class TestJointIdentifierProb:
    def test_single_token_label_times_terminator(self):
        backend = PresetBackend({"7]": [0.6, 0.5]})
        assert joint_identifier_prob(backend, "p", "", "7") == pytest.approx(0.30, abs=1e-12)

    def test_multi_token_label(self):
        backend = PresetBackend({"10]": [0.4, 0.5, 0.9]})
        assert joint_identifier_prob(backend, "p", "", "10") == pytest.approx(0.18, abs=1e-12)

    def test_simulator_uniform_with_unit_terminator(self):
        task = make_task(n=4)
        sim = sim_for(task, position_bias=[0.0] * 4)
        prompt = render_main_prompt(task)
        for label in ("1", "2", "3", "4"):
            assert joint_identifier_prob(sim, prompt, "", label) == pytest.approx(0.25, abs=1e-12)


class TestStepEntropy:
    def test_uniform_over_four(self):
        p = {i: 0.25 for i in range(1, 5)}
        assert step_entropy(p, set(p)) == pytest.approx(math.log(4), abs=1e-12)

    def test_one_hot_is_zero(self):
        p = {1: 1.0, 2: 0.0, 3: 0.0}
        assert step_entropy(p, set(p)) == 0.0

    def test_hand_computed_three_way(self):
        p = {1: 0.5, 2: 0.3, 3: 0.2}
        expected = -(0.5 * math.log(0.5) + 0.3 * math.log(0.3) + 0.2 * math.log(0.2))
        assert expected == pytest.approx(1.02965, abs=1e-5)
        assert step_entropy(p, set(p)) == pytest.approx(expected, abs=1e-12)

    def test_normalizes_unnormalized_mass(self):
        scaled = {1: 0.05, 2: 0.03, 3: 0.02}  # same shape, sum 0.1
        assert step_entropy(scaled, set(scaled)) == pytest.approx(1.0296530140645737, abs=1e-12)

    def test_degenerate_mass_reports_max_entropy(self):
        p = {1: 0.0, 2: 0.0, 3: 1e-15}
        assert step_entropy(p, set(p), epsilon=1e-12) == pytest.approx(math.log(3))

    def test_restricted_to_remaining_subset(self):
        p = {1: 0.5, 2: 0.25, 3: 0.25}
        assert step_entropy(p, {2, 3}) == pytest.approx(math.log(2), abs=1e-12)

    def test_empty_remaining_rejected(self):
        with pytest.raises(ValueError):
            step_entropy({1: 1.0}, set())

    def test_bounds_under_random_inputs(self):
        rng = random.Random(5)
        for _ in range(300):
            n = rng.randint(1, 12)
            p = {i: rng.random() for i in range(1, n + 1)}
            h = step_entropy(p, set(p))
            assert 0.0 <= h <= math.log(n) or math.isclose(h, math.log(n))


class TestCalibratedScores:
    def test_uniform_prior_is_identity(self):
        p_main = {1: 0.5, 2: 0.3, 3: 0.2}
        p_prior = {1: 1 / 3, 2: 1 / 3, 3: 1 / 3}
        for beta in (0.0, 1.0, 7.5):
            scores = calibrated_scores(p_main, p_prior, {1, 2, 3}, beta)
            for i in (1, 2, 3):
                assert scores[i] == pytest.approx(p_main[i], abs=1e-12)

    def test_beta_zero_is_identity(self):
        p_main = {1: 0.7, 2: 0.2, 3: 0.1}
        p_prior = {1: 0.9, 2: 0.05, 3: 0.05}
        scores = calibrated_scores(p_main, p_prior, {1, 2, 3}, beta=0.0)
        assert scores == p_main

    def test_worked_three_candidate_fixture(self):
        p_main = {1: 0.5, 2: 0.3, 3: 0.2}
        p_prior = {1: 0.6, 2: 0.2, 3: 0.2}
        scores = calibrated_scores(p_main, p_prior, {1, 2, 3}, beta=1.0)
        alpha = -(0.5 * math.log(0.5) + 0.3 * math.log(0.3) + 0.2 * math.log(0.2))
        assert scores[1] == pytest.approx(0.5 - alpha * (0.6 - 1 / 3), abs=1e-12)
        assert scores[1] == pytest.approx(0.2254, abs=1e-4)
        assert scores[2] == pytest.approx(0.4373, abs=1e-4)
        assert scores[3] == pytest.approx(0.3373, abs=1e-4)
        assert max(scores, key=scores.get) == 2  # leader flips from 1 to 2

    def test_prior_monotonicity(self):
        # shifting prior mass toward a candidate strictly lowers its score
        p_main = {1: 0.4, 2: 0.35, 3: 0.25}
        low = calibrated_scores(p_main, {1: 0.4, 2: 0.3, 3: 0.3}, {1, 2, 3}, beta=1.0)
        high = calibrated_scores(p_main, {1: 0.6, 2: 0.1, 3: 0.3}, {1, 2, 3}, beta=1.0)
        assert high[1] < low[1]
        assert high[2] > low[2]

    def test_scores_may_go_negative(self):
        p_main = {1: 0.05, 2: 0.95}
        p_prior = {1: 0.99, 2: 0.01}
        scores = calibrated_scores(p_main, p_prior, {1, 2}, beta=2.0)
        assert scores[1] < 0.0

    def test_raw_prior_skips_renormalization(self):
        p_main = {1: 0.5, 2: 0.5}
        p_prior = {1: 0.4, 2: 0.1}  # unnormalized over the pair
        renorm = calibrated_scores(p_main, p_prior, {1, 2}, beta=1.0)
        raw = calibrated_scores(p_main, p_prior, {1, 2}, beta=1.0, raw_prior=True)
        h = math.log(2)
        assert raw[1] == pytest.approx(0.5 - h * (0.4 - 0.5), abs=1e-12)
        assert renorm[1] == pytest.approx(0.5 - h * (0.8 - 0.5), abs=1e-12)

    def test_zero_mass_prior_contributes_nothing(self):
        p_main = {1: 0.6, 2: 0.4}
        scores = calibrated_scores(p_main, {1: 0.0, 2: 0.0}, {1, 2}, beta=1.0)
        assert scores[1] == pytest.approx(0.6, abs=1e-12)
        assert scores[2] == pytest.approx(0.4, abs=1e-12)


def two_doc_biased_sim():
    """Simulator solving for p_main = [0.55, 0.45], p_prior = [0.8, 0.2]."""
    bias = [math.log(0.8), math.log(0.2)]
    rel = [math.log(0.55) - bias[0], math.log(0.45) - bias[1]]
    task = make_task(n=2)
    sim = sim_for(
        task,
        relevance_by_doc={"d1": rel[0], "d2": rel[1]},
        position_bias=bias,
    )
    return task, sim


class TestDecoders:
    def test_two_candidate_worked_example(self):
        task, sim = two_doc_biased_sim()
        ranking = decode_capcal(sim, task)
        step = ranking.trace[0]
        assert step.p_main[1] == pytest.approx(0.55, abs=1e-12)
        assert step.p_prior[1] == pytest.approx(0.80, abs=1e-12)
        assert step.entropy_h == pytest.approx(0.6881, abs=1e-4)
        assert step.alpha_k == pytest.approx(0.6881, abs=1e-4)
        assert step.scores[1] == pytest.approx(0.3436, abs=1e-4)
        assert step.scores[2] == pytest.approx(0.6564, abs=1e-4)
        assert ranking.permutation.order == (2, 1)
        assert decode_base(sim, task).permutation.order == (1, 2)

    def test_base_follows_biased_leader(self):
        task = make_task(n=3)
        sim = sim_for(task, relevance_by_doc={"d3": 1.0}, position_bias=[2.0, 0.0, 0.0])
        ranking = decode_base(sim, task)
        assert ranking.permutation.order[0] == 1  # slot bias outvotes relevance
        expected = softmax([2.0, 0.0, 1.0])
        for i in (1, 2, 3):
            assert ranking.trace[0].p_main[i] == pytest.approx(expected[i - 1], abs=1e-12)
        assert ranking.trace[0].p_prior is None
        assert ranking.trace[0].alpha_k == 0.0

    def test_base_tie_break_lowest_index(self):
        task = make_task(n=2)
        sim = sim_for(task)  # no relevance, no bias: a perfect tie
        assert decode_base(sim, task).permutation.order == (1, 2)

    def test_beta_zero_matches_base(self):
        rng = random.Random(11)
        for _ in range(25):
            task, sim, _, _, _ = random_sim_task(rng)
            capcal = decode_capcal(sim, task, config=CalibrationConfig(beta=0.0))
            base = decode_base(sim, task)
            assert capcal.permutation.order == base.permutation.order
            for s_c, s_b in zip(capcal.trace, base.trace):
                assert s_c.p_main == s_b.p_main

    def test_zero_bias_sorts_by_relevance(self):
        task = make_task(n=5)
        rel = {"d1": -0.4, "d2": 2.0, "d3": 0.3, "d4": 1.1, "d5": -2.0}
        sim = sim_for(task, relevance_by_doc=rel)
        ranking = decode_capcal(sim, task)
        by_rel = sorted(range(1, 6), key=lambda i: rel[f"d{i}"], reverse=True)
        assert list(ranking.permutation.order) == by_rel

    def test_uniform_prior_no_op_on_permutation(self):
        rng = random.Random(13)
        for _ in range(25):
            task, sim, rel, _, temp = random_sim_task(rng)
            unbiased = SimulatedLM(relevance=sim.relevance, position_bias=[], temperature=temp)
            unbiased.register_task(task)
            assert (
                decode_capcal(unbiased, task).permutation.order
                == decode_base(unbiased, task).permutation.order
            )

    def test_trace_invariants(self):
        rng = random.Random(17)
        for _ in range(20):
            task, sim, _, _, _ = random_sim_task(rng, extreme=True)
            config = CalibrationConfig(beta=rng.choice([0.0, 0.5, 1.0, 3.0]))
            ranking = decode_capcal(sim, task, config=config)
            n = len(task.candidates)
            assert len(ranking.trace) == n
            assert validate_permutation(ranking.permutation, n)
            for step in ranking.trace:
                m = len(step.remaining)
                assert step.chosen in step.remaining
                assert -1e-12 <= step.entropy_h <= math.log(m) + 1e-12
                assert step.alpha_k == pytest.approx(config.beta * step.entropy_h, abs=1e-9)
                assert all(0.0 <= v <= 1.0 for v in step.p_main.values())
                assert all(0.0 <= v <= 1.0 for v in step.p_prior.values())
                best = max(
                    sorted(step.remaining),
                    key=lambda i: (step.scores[i], step.p_main[i], -i),
                )
                assert step.chosen == best
                total = sum(step.p_main.values())
                if total > 0:
                    assert sum(v / total for v in step.p_main.values()) == pytest.approx(1.0, abs=1e-9)

    def test_matches_naive_recomputation(self):
        rng = random.Random(23)
        for _ in range(40):
            task, sim, rel, bias, temp = random_sim_task(rng, n=rng.randint(2, 5))
            ranking = decode_capcal(sim, task)
            expected = naive_greedy_steps(rel, bias, temp, beta=1.0)
            for step, want in zip(ranking.trace, expected):
                assert sorted(step.remaining) == want["remaining"]
                assert step.entropy_h == pytest.approx(want["entropy"], abs=1e-9)
                assert step.alpha_k == pytest.approx(want["alpha"], abs=1e-9)
                for i in want["scores"]:
                    assert step.scores[i] == pytest.approx(want["scores"][i], abs=1e-9)
                assert step.chosen == want["chosen"]

    def test_static_prior_equals_lockstep_under_simulator(self):
        # restricting a softmax and renormalizing it commute, so the two
        # prior modes coincide exactly on the simulator's factored logits
        rng = random.Random(29)
        for _ in range(10):
            task, sim, _, _, _ = random_sim_task(rng)
            lockstep = decode_capcal(
                sim, task, config=CalibrationConfig(prior_mode=PriorMode.LOCKSTEP)
            )
            static = decode_capcal(
                sim, task, config=CalibrationConfig(prior_mode=PriorMode.STATIC_RENORMALIZED)
            )
            assert lockstep.permutation.order == static.permutation.order
            for a, b in zip(lockstep.trace, static.trace):
                for i in a.scores:
                    assert a.scores[i] == pytest.approx(b.scores[i], abs=1e-9)

    def test_prefix_grows_with_separator(self):
        task, sim = two_doc_biased_sim()
        seen_prefixes = []
        original = sim.score_continuations

        def spy(request):
            seen_prefixes.append(request.prefix)
            return original(request)

        sim.score_continuations = spy
        decode_capcal(sim, task)
        # two streams at step 1 with empty prefix, two at step 2 with "[2] > "
        assert seen_prefixes[:2] == ["", ""]
        assert seen_prefixes[2:] == ["[2] > ", "[2] > "]

    def test_backend_failure_attaches_partial_trace(self):
        task = make_task(n=3)
        sim = sim_for(task)
        calls = {"n": 0}
        original = sim.score_continuations

        def flaky(request):
            calls["n"] += 1
            if calls["n"] > 3:
                raise BackendUnavailable("gone away")
            return original(request)

        sim.score_continuations = flaky
        with pytest.raises(DecodeAborted) as exc_info:
            decode_capcal(sim, task)
        assert len(exc_info.value.trace) >= 1

    def test_alphabetic_scheme_decodes(self):
        from capcal import SchemeKind

        task = make_task(n=3, scheme=SchemeKind.ALPHABETIC)
        sim = sim_for(task, relevance_by_doc={"d2": 2.0}, position_bias=[0.5, 0.0, 0.0])
        ranking = decode_capcal(sim, task)
        assert validate_permutation(ranking.permutation, 3)
        assert ranking.permutation.order[0] == 2


def identity_inner(backend, task, template):
    return Permutation(tuple(range(1, len(task.candidates) + 1)))


def reversing_inner(backend, task, template):
    return Permutation(tuple(range(len(task.candidates), 0, -1)))


class TestSlidingWindow:
    def test_small_list_is_one_inner_call(self):
        task = make_task(n=4)
        sim = sim_for(task, relevance_by_doc={"d4": 3.0})
        direct = decode_base(sim, task).permutation
        windowed = sliding_window_rerank(sim, task, DEFAULT_TEMPLATE, 5, 2, decode_base)
        assert windowed.order == direct.order

    def test_identity_inner_keeps_order(self):
        task = make_task(n=4, window_cap=4)
        perm = sliding_window_rerank(None, task, DEFAULT_TEMPLATE, 3, 2, identity_inner)
        assert perm.order == (1, 2, 3, 4)

    def test_reversing_inner_hand_trace(self):
        # N=4, w=3, s=2: window over slots 2..4 reverses [2,3,4] -> [1,4,3,2],
        # then window over slots 1..3 reverses [1,4,3] -> [3,4,1,2]
        task = make_task(n=4, window_cap=4)
        perm = sliding_window_rerank(None, task, DEFAULT_TEMPLATE, 3, 2, reversing_inner)
        assert perm.order == (3, 4, 1, 2)

    def test_long_list_with_simulator(self):
        task = make_task(n=30, window_cap=30)
        rel = {f"d{i}": (i % 7) * 0.5 for i in range(1, 31)}
        sim = sim_for(task, relevance_by_doc=rel, position_bias=[1.0] + [0.0] * 29)
        perm = sliding_window_rerank(sim, task, DEFAULT_TEMPLATE, 10, 5, decode_base)
        assert validate_permutation(perm, 30)

    def test_identical_texts_still_valid(self):
        task = make_task(n=6, texts=["same text"] * 6, window_cap=6)
        sim = sim_for(task)
        perm = sliding_window_rerank(sim, task, DEFAULT_TEMPLATE, 4, 2, decode_base)
        assert validate_permutation(perm, 6)

    def test_stride_bounds_enforced(self):
        task = make_task(n=4, window_cap=4)
        with pytest.raises(ValueError):
            sliding_window_rerank(None, task, DEFAULT_TEMPLATE, 3, 3, identity_inner)
        with pytest.raises(ValueError):
            sliding_window_rerank(None, task, DEFAULT_TEMPLATE, 3, 0, identity_inner)
