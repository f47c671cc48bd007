"""Order perturbations and aggregation baselines.

Random shuffling stresses a decoder's sensitivity to input order;
permutation self-consistency (PSC) spends k full reranking passes over
independently shuffled copies and averages the resulting ranks per
document, trading latency for order-invariance.
"""

from __future__ import annotations

import random
import statistics
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

from .backends import ScoringBackend
from .calibration import _permutation_of
from .domain import Candidate, Permutation, RerankTask
from .prompting import PromptTemplate


class Aggregation(str, Enum):
    MEAN_RANK = "mean_rank"
    MEDIAN_RANK = "median_rank"


@dataclass(frozen=True)
class PscConfig:
    k_permutations: int = 10
    seed: int = 0
    aggregation: Aggregation = Aggregation.MEAN_RANK

    def __post_init__(self) -> None:
        if self.k_permutations < 1:
            raise ValueError(f"k_permutations must be >= 1, got {self.k_permutations}")


def _shuffled_candidates(candidates: list[Candidate], seed: int) -> list[Candidate]:
    order = list(candidates)
    if len(order) > 1:
        random.Random(seed).shuffle(order)
    return [replace(c, original_index=pos) for pos, c in enumerate(order, start=1)]


def shuffle_candidates(task: RerankTask, seed: int) -> RerankTask:
    """Uniformly reshuffle a task's candidate order.

    Texts and doc ids travel with their documents; slot indices are
    reassigned to the new order, so the original arrangement is recoverable
    through the (unique) doc ids. Deterministic for a fixed seed.
    """
    return replace(task, candidates=tuple(_shuffled_candidates(list(task.candidates), seed)))


def psc_rerank(
    backend: ScoringBackend,
    task: RerankTask,
    template: PromptTemplate,
    config: PscConfig,
    inner: Callable[[ScoringBackend, RerankTask, PromptTemplate], object],
) -> Permutation:
    """Permutation self-consistency: aggregate ranks over shuffled passes.

    Each of the k passes reranks an independently shuffled copy; per-pass
    ranks are mapped back to source documents and combined by mean (or
    median) rank, ascending, with ties broken by doc id. Any failed pass
    aborts the whole aggregation: averaging a biased subset of permutations
    would quietly reintroduce the order effects the method exists to cancel.
    """
    seed_rng = random.Random(config.seed)
    pass_seeds = [seed_rng.getrandbits(63) for _ in range(config.k_permutations)]

    positions: dict[str, list[int]] = {c.doc_id: [] for c in task.candidates}
    for pass_seed in pass_seeds:
        shuffled = shuffle_candidates(task, pass_seed)
        perm = _permutation_of(inner(backend, shuffled, template))  # type: ignore[arg-type]
        for rank_pos, idx in enumerate(perm.order, start=1):
            positions[shuffled.candidates[idx - 1].doc_id].append(rank_pos)

    if config.aggregation is Aggregation.MEAN_RANK:
        aggregate = {doc: statistics.fmean(ranks) for doc, ranks in positions.items()}
    else:
        aggregate = {doc: float(statistics.median(ranks)) for doc, ranks in positions.items()}

    ordered_docs = sorted(positions, key=lambda doc: (aggregate[doc], doc))
    source_index = {c.doc_id: c.original_index for c in task.candidates}
    return Permutation(tuple(source_index[doc] for doc in ordered_docs))
