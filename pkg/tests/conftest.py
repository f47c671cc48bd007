import math

import pytest

from capcal import (
    Candidate,
    IdentifierScheme,
    PlaceholderPolicy,
    Query,
    RerankTask,
    SchemeKind,
    SimulatedLM,
)


def make_task(
    query_id="q1",
    query_text="test query",
    n=3,
    texts=None,
    scheme=SchemeKind.NUMERIC,
    placeholder=None,
    doc_prefix="d",
    window_cap=None,
):
    """A small rerank task with distinct per-slot texts."""
    if texts is None:
        texts = [f"document body number {i}" for i in range(1, n + 1)]
    candidates = tuple(
        Candidate(doc_id=f"{doc_prefix}{i}", text=texts[i - 1], original_index=i)
        for i in range(1, n + 1)
    )
    kwargs = {}
    if window_cap is not None:
        kwargs["window_cap"] = window_cap
    return RerankTask(
        query=Query(id=query_id, text=query_text),
        candidates=candidates,
        scheme=IdentifierScheme(scheme),
        placeholder=placeholder or PlaceholderPolicy(),
        **kwargs,
    )


def softmax(logits):
    """Independent softmax used as a hand oracle in tests."""
    peak = max(logits)
    exps = [math.exp(z - peak) for z in logits]
    total = sum(exps)
    return [e / total for e in exps]


def sim_for(task, relevance_by_doc=None, position_bias=(), temperature=1.0, seed=0):
    """A registered simulator whose relevance table is keyed by doc id."""
    relevance = {}
    for doc_id, logit in (relevance_by_doc or {}).items():
        relevance[(task.query.id, doc_id)] = logit
    sim = SimulatedLM(
        relevance=relevance,
        position_bias=position_bias,
        temperature=temperature,
        seed=seed,
    )
    sim.register_task(task)
    return sim


@pytest.fixture
def three_doc_task():
    return make_task(n=3)
