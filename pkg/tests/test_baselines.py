import itertools
from collections import Counter

import pytest

from capcal import (
    Aggregation,
    Candidate,
    Permutation,
    PscConfig,
    decode_base,
    psc_rerank,
    shuffle_candidates,
    validate_permutation,
)
from capcal.baselines import _shuffled_candidates
from capcal.prompting import DEFAULT_TEMPLATE

from conftest import make_task, sim_for
from oracles import random_sim_task


class TestShuffle:
    def test_deterministic_for_fixed_seed(self):
        task = make_task(n=6)
        a = shuffle_candidates(task, seed=42)
        b = shuffle_candidates(task, seed=42)
        assert [c.doc_id for c in a.candidates] == [c.doc_id for c in b.candidates]
        c = shuffle_candidates(task, seed=43)
        assert [x.doc_id for x in a.candidates] != [x.doc_id for x in c.candidates]

    def test_documents_travel_with_their_ids(self):
        task = make_task(n=5)
        shuffled = shuffle_candidates(task, seed=7)
        original = {c.doc_id: c.text for c in task.candidates}
        for cand in shuffled.candidates:
            assert cand.text == original[cand.doc_id]

    def test_indices_reassigned_to_new_slots(self):
        task = make_task(n=5)
        shuffled = shuffle_candidates(task, seed=7)
        assert [c.original_index for c in shuffled.candidates] == [1, 2, 3, 4, 5]
        assert {c.doc_id for c in shuffled.candidates} == {c.doc_id for c in task.candidates}

    def test_single_candidate_list_unchanged(self):
        only = [Candidate("d1", "text", 1)]
        assert _shuffled_candidates(only, seed=99) == only

    def test_uniform_over_orders(self):
        # 6000 seeds over 3 candidates: each of the 6 orders within 1000 +- 120
        task = make_task(n=3)
        counts = Counter()
        for seed in range(6000):
            shuffled = shuffle_candidates(task, seed)
            counts[tuple(c.doc_id for c in shuffled.candidates)] += 1
        assert len(counts) == 6
        for order, count in counts.items():
            assert abs(count - 1000) <= 120, (order, count)


def inner_returning_doc_orders(doc_orders):
    """Stub decoder emitting predetermined doc-id rankings, one per pass."""
    passes = iter(doc_orders)

    def inner(backend, task, template):
        target = next(passes)
        index_of = {c.doc_id: c.original_index for c in task.candidates}
        return Permutation(tuple(index_of[d] for d in target))

    return inner


class TestPscRerank:
    def test_fixed_point_when_all_passes_agree(self):
        task = make_task(n=3, doc_prefix="doc")
        config = PscConfig(k_permutations=4, seed=1)
        inner = inner_returning_doc_orders([["doc2", "doc3", "doc1"]] * 4)
        perm = psc_rerank(None, task, DEFAULT_TEMPLATE, config, inner)
        ranked_docs = [task.candidates[i - 1].doc_id for i in perm.order]
        assert ranked_docs == ["doc2", "doc3", "doc1"]

    def test_mean_rank_hand_case(self):
        # ranks per doc across 2 passes: A=(1,3) B=(2,1) C=(3,2)
        # means A=2.0 B=1.5 C=2.5 -> [B, A, C]
        task = make_task(n=3, doc_prefix="")
        # doc ids are "1","2","3"; call them A,B,C in that order
        a, b, c = (cand.doc_id for cand in task.candidates)
        inner = inner_returning_doc_orders([[a, b, c], [b, c, a]])
        perm = psc_rerank(None, task, DEFAULT_TEMPLATE, PscConfig(k_permutations=2), inner)
        ranked = [task.candidates[i - 1].doc_id for i in perm.order]
        assert ranked == [b, a, c]

    def test_k1_is_inner_mapped_back(self):
        task = make_task(n=4)
        sim = sim_for(task, relevance_by_doc={"d3": 2.0, "d1": 1.0})
        config = PscConfig(k_permutations=1, seed=5)
        perm = psc_rerank(sim, task, DEFAULT_TEMPLATE, config, decode_base)
        # bias-free, so the single pass sorts by relevance regardless of shuffle
        assert [task.candidates[i - 1].doc_id for i in perm.order][:2] == ["d3", "d1"]

    def test_median_aggregation(self):
        task = make_task(n=3, doc_prefix="")
        a, b, c = (cand.doc_id for cand in task.candidates)
        # ranks: A=(1,3,3) median 3; B=(2,1,1) median 1; C=(3,2,2) median 2
        inner = inner_returning_doc_orders([[a, b, c], [b, c, a], [b, c, a]])
        config = PscConfig(k_permutations=3, aggregation=Aggregation.MEDIAN_RANK)
        perm = psc_rerank(None, task, DEFAULT_TEMPLATE, config, inner)
        assert [task.candidates[i - 1].doc_id for i in perm.order] == [b, c, a]

    def test_tied_aggregate_breaks_by_doc_id(self):
        task = make_task(n=2, doc_prefix="tie")
        first, second = (cand.doc_id for cand in task.candidates)
        inner = inner_returning_doc_orders([[second, first], [first, second]])
        perm = psc_rerank(None, task, DEFAULT_TEMPLATE, PscConfig(k_permutations=2), inner)
        assert [task.candidates[i - 1].doc_id for i in perm.order] == sorted([first, second])

    def test_output_always_valid_permutation(self):
        import random

        rng = random.Random(31)
        for _ in range(10):
            task, sim, _, _, _ = random_sim_task(rng, n=rng.randint(2, 8))
            perm = psc_rerank(sim, task, DEFAULT_TEMPLATE, PscConfig(k_permutations=3, seed=rng.randrange(1000)), decode_base)
            assert validate_permutation(perm, len(task.candidates))

    def test_bias_free_simulator_recovers_relevance_order(self):
        task = make_task(n=6)
        rel = {"d1": 0.9, "d2": -1.2, "d3": 2.4, "d4": 0.1, "d5": 1.7, "d6": -0.3}
        sim = sim_for(task, relevance_by_doc=rel)
        expected = decode_base(sim, task).permutation.order
        for seed in (0, 9, 123):
            perm = psc_rerank(sim, task, DEFAULT_TEMPLATE, PscConfig(k_permutations=5, seed=seed), decode_base)
            assert perm.order == expected

    def test_aggregation_order_invariant(self):
        task = make_task(n=3, doc_prefix="")
        a, b, c = (cand.doc_id for cand in task.candidates)
        orders = [[a, b, c], [b, c, a], [c, a, b]]
        forward = psc_rerank(
            None, task, DEFAULT_TEMPLATE, PscConfig(k_permutations=3),
            inner_returning_doc_orders(orders),
        )
        for shuffled_orders in itertools.permutations(orders):
            again = psc_rerank(
                None, task, DEFAULT_TEMPLATE, PscConfig(k_permutations=3),
                inner_returning_doc_orders(list(shuffled_orders)),
            )
            assert again.order == forward.order

    def test_failed_pass_aborts_whole_aggregation(self):
        from capcal import BackendUnavailable

        task = make_task(n=3)

        def exploding(backend, t, template):
            raise BackendUnavailable("pass failed")

        with pytest.raises(BackendUnavailable):
            psc_rerank(None, task, DEFAULT_TEMPLATE, PscConfig(k_permutations=2), exploding)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            PscConfig(k_permutations=0)
