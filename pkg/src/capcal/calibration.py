"""Calibrated and uncalibrated constrained decoding over candidate labels.

The decoder emits a permutation greedily, one identifier at a time,
restricted at every step to candidates not yet ranked. The calibrated
variant scores each survivor as

    S(d) = p_main(d) - alpha_k * (prior(d) - 1/|remaining|)

where p_main is the joint identifier probability under the real prompt,
prior is the same quantity under the content-free prompt (renormalized
over the remaining set by default), and alpha_k = beta * H with H the
Shannon entropy in nats of the normalized main distribution. An unbiased
model given contentless input would sit exactly on the uniform line, so
only the deviation from uniform is treated as slot preference and
removed; the entropy weight makes the correction strong when the model is
guessing and negligible when it is confident.

Subtraction happens in probability space, not logit space: identifiers
tokenize to different lengths ("9" vs "10"), and only joint probabilities
of the full label-plus-terminator sequence are comparable across them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence, Set, Union

from .backends import BackendError, ScoringBackend, ScoringRequest
from .domain import (
    Permutation,
    RerankTask,
    StepTrace,
    TokenSeq,
    render_label,
    validate_permutation,
)
from .prompting import (
    DEFAULT_TEMPLATE,
    PromptTemplate,
    render_empty_prompt,
    render_main_prompt,
)

DEFAULT_EPSILON = 1e-12

#: Separator between emitted identifiers, matching the instructed
#: "[] > []" output format.
RANK_SEPARATOR = " > "


class PriorMode(str, Enum):
    """When the content-free stream is scored.

    ``lockstep`` re-scores the empty prompt at every step with the same
    generated prefix as the main stream, giving a true per-step
    conditional. ``static_renormalized`` scores the empty prompt once at
    the first step and renormalizes the cached values over the shrinking
    candidate set; one forward pass cheaper, coarser conditioning.
    """

    LOCKSTEP = "lockstep"
    STATIC_RENORMALIZED = "static_renormalized"


class TieBreak(str, Enum):
    BY_MAIN_PROB_THEN_LOWEST_INDEX = "by_main_prob_then_lowest_index"


@dataclass(frozen=True)
class CalibrationConfig:
    """Knobs of the calibrated decoder.

    ``raw_prior`` skips renormalizing the prior over the remaining set
    before the subtraction (ablation switch; the renormalized form is the
    one whose uniform baseline 1/|remaining| is actually comparable).
    """

    beta: float = 1.0
    prior_mode: PriorMode = PriorMode.LOCKSTEP
    terminator: str = "]"
    tie_break: TieBreak = TieBreak.BY_MAIN_PROB_THEN_LOWEST_INDEX
    epsilon: float = DEFAULT_EPSILON
    raw_prior: bool = False

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class CalibratedRanking:
    permutation: Permutation
    trace: tuple[StepTrace, ...]
    config_used: CalibrationConfig


class DecodeAborted(BackendError):
    """A backend failure interrupted a decode; completed steps are attached."""

    def __init__(self, message: str, trace: tuple[StepTrace, ...] = ()) -> None:
        super().__init__(message)
        self.trace = trace


Decoder = Callable[[ScoringBackend, RerankTask, PromptTemplate], "CalibratedRanking"]


def joint_identifier_prob(
    backend: ScoringBackend,
    prompt: str,
    prefix: str,
    label: str,
    terminator: str = "]",
) -> float:
    """Probability of the full identifier continuation, terminator included.

    The product over the label's tokens and the closing terminator is what
    makes one-token labels like "7" comparable to two-token labels like
    "10": both are priced as complete, closed identifiers.
    """
    seq = backend.tokenize_label(label, terminator)
    scored = backend.score_continuations(ScoringRequest(prompt, prefix, (seq,)))
    return math.exp(scored[0].total_logprob)


def step_entropy(
    p_main: Mapping[int, float],
    remaining: Set[int],
    epsilon: float = DEFAULT_EPSILON,
) -> float:
    """Shannon entropy in nats of p_main normalized over ``remaining``.

    If every remaining mass is at or below ``epsilon`` the model has
    expressed no preference at all; that degenerate case is reported as
    maximum entropy ln(n) rather than an error, since "no preference" is
    precisely the maximally uncertain regime.
    """
    if not remaining:
        raise ValueError("remaining candidate set is empty")
    values = [p_main[i] for i in remaining]
    n = len(values)
    if all(v <= epsilon for v in values):
        return math.log(n)
    total = sum(values)
    h = 0.0
    for v in values:
        p = v / total
        if p > 0.0:
            h -= p * math.log(p)
    # clamp float dust so 0 <= H <= ln(n) holds exactly
    return max(0.0, min(h, math.log(n)))


def calibrated_scores(
    p_main: Mapping[int, float],
    p_prior: Mapping[int, float],
    remaining: Set[int],
    beta: float,
    *,
    epsilon: float = DEFAULT_EPSILON,
    raw_prior: bool = False,
) -> dict[int, float]:
    """Bias-corrected scores over the remaining candidates.

    A uniform prior contributes nothing (the deviation term vanishes), so
    argmax decisions are untouched wherever the model shows no slot
    preference. Scores may go negative; only their order matters.
    """
    idxs = sorted(remaining)
    n = len(idxs)
    uniform = 1.0 / n
    alpha = beta * step_entropy(p_main, remaining, epsilon)
    if raw_prior:
        prior = {i: p_prior[i] for i in idxs}
    else:
        total = sum(p_prior[i] for i in idxs)
        if total <= 0.0:
            # prior pass returned no mass at all: nothing to subtract
            prior = {i: uniform for i in idxs}
        else:
            prior = {i: p_prior[i] / total for i in idxs}
    return {i: p_main[i] - alpha * (prior[i] - uniform) for i in idxs}


def _joint_probs(
    backend: ScoringBackend,
    prompt: str,
    prefix: str,
    idxs: Sequence[int],
    continuation_for: Callable[[int], TokenSeq],
) -> dict[int, float]:
    request = ScoringRequest(
        prompt=prompt,
        prefix=prefix,
        continuations=tuple(continuation_for(i) for i in idxs),
    )
    scored = backend.score_continuations(request)
    if len(scored) != len(idxs):
        raise BackendError(
            f"backend returned {len(scored)} scores for {len(idxs)} continuations"
        )
    return {i: math.exp(s.total_logprob) for i, s in zip(idxs, scored)}


def _decode(
    backend: ScoringBackend,
    task: RerankTask,
    template: PromptTemplate,
    config: CalibrationConfig,
    use_prior: bool,
) -> CalibratedRanking:
    hook = getattr(backend, "register_task", None)
    if hook is not None:
        hook(task, template)

    n = len(task.candidates)
    labels = {i: render_label(task.scheme, i) for i in range(1, n + 1)}
    token_cache: dict[int, TokenSeq] = {}

    def continuation_for(i: int) -> TokenSeq:
        seq = token_cache.get(i)
        if seq is None:
            seq = backend.tokenize_label(labels[i], config.terminator)
            token_cache[i] = seq
        return seq

    main_prompt = render_main_prompt(task, template)
    empty_prompt = render_empty_prompt(task, template) if use_prior else ""
    static_prior: Optional[dict[int, float]] = None

    remaining: set[int] = set(labels)
    prefix = ""
    order: list[int] = []
    trace: list[StepTrace] = []
    try:
        for k in range(1, n + 1):
            idxs = sorted(remaining)
            p_main = _joint_probs(backend, main_prompt, prefix, idxs, continuation_for)
            p_prior: Optional[dict[int, float]] = None
            if use_prior:
                if config.prior_mode is PriorMode.LOCKSTEP:
                    p_prior = _joint_probs(
                        backend, empty_prompt, prefix, idxs, continuation_for
                    )
                else:
                    if static_prior is None:
                        static_prior = _joint_probs(
                            backend, empty_prompt, "", sorted(labels), continuation_for
                        )
                    p_prior = {i: static_prior[i] for i in idxs}

            entropy_h = step_entropy(p_main, remaining, config.epsilon)
            if use_prior:
                assert p_prior is not None
                alpha_k = config.beta * entropy_h
                scores = calibrated_scores(
                    p_main,
                    p_prior,
                    remaining,
                    config.beta,
                    epsilon=config.epsilon,
                    raw_prior=config.raw_prior,
                )
            else:
                alpha_k = 0.0
                scores = dict(p_main)

            chosen = max(idxs, key=lambda i: (scores[i], p_main[i], -i))
            trace.append(
                StepTrace(
                    step_index=k,
                    remaining=frozenset(remaining),
                    p_main=p_main,
                    p_prior=p_prior,
                    entropy_h=entropy_h,
                    alpha_k=alpha_k,
                    scores=scores,
                    chosen=chosen,
                )
            )
            order.append(chosen)
            separator = RANK_SEPARATOR if k < n else ""
            prefix = f"{prefix}[{labels[chosen]}]{separator}"
            remaining.discard(chosen)
    except BackendError as err:
        raise DecodeAborted(f"decode aborted at step {len(trace) + 1}: {err}", tuple(trace)) from err

    permutation = Permutation(tuple(order))
    if not validate_permutation(permutation, n):  # pragma: no cover - loop guarantees it
        raise AssertionError(f"decoder produced invalid permutation {permutation.order}")
    return CalibratedRanking(permutation=permutation, trace=tuple(trace), config_used=config)


def decode_capcal(
    backend: ScoringBackend,
    task: RerankTask,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    config: Optional[CalibrationConfig] = None,
) -> CalibratedRanking:
    """Greedy constrained decode with content-free prior subtraction."""
    return _decode(backend, task, template, config or CalibrationConfig(), use_prior=True)


def decode_base(
    backend: ScoringBackend,
    task: RerankTask,
    template: PromptTemplate = DEFAULT_TEMPLATE,
) -> CalibratedRanking:
    """Uncalibrated greedy decode; scores are the main-prompt probabilities.

    Equivalent to the calibrated decoder at beta = 0, but never issues the
    content-free pass. Traces record the prior as absent and alpha = 0.
    """
    return _decode(backend, task, template, CalibrationConfig(beta=0.0), use_prior=False)


def _permutation_of(result: Union[Permutation, CalibratedRanking]) -> Permutation:
    if isinstance(result, Permutation):
        return result
    return result.permutation


def sliding_window_rerank(
    backend: ScoringBackend,
    task: RerankTask,
    template: PromptTemplate,
    window_size: int,
    stride: int,
    inner: Callable[[ScoringBackend, RerankTask, PromptTemplate], object],
) -> Permutation:
    """Rerank a list longer than one prompt window.

    Overlapping windows are decoded back-to-front, each pass reordering its
    slice in place, so strong tail candidates bubble toward the head across
    passes. ``inner`` is any single-window decoder; it may return either a
    :class:`CalibratedRanking` or a bare :class:`Permutation`.
    """
    if window_size < 2:
        raise ValueError(f"window_size must be >= 2, got {window_size}")
    if not 1 <= stride < window_size:
        raise ValueError(f"stride must satisfy 1 <= stride < window_size, got {stride}")

    n = len(task.candidates)
    if n <= window_size:
        return _permutation_of(inner(backend, task, template))  # type: ignore[arg-type]

    order = list(range(1, n + 1))
    start = n - window_size
    while True:
        segment = order[start : start + window_size]
        sub = _window_task(task, segment, window_size)
        result = inner(backend, sub, template)
        perm = _permutation_of(result)  # type: ignore[arg-type]
        order[start : start + window_size] = [segment[p - 1] for p in perm.order]
        if start == 0:
            break
        start = max(0, start - stride)

    permutation = Permutation(tuple(order))
    if not validate_permutation(permutation, n):  # pragma: no cover
        raise AssertionError("window merge produced an invalid permutation")
    return permutation


def _window_task(task: RerankTask, segment: Sequence[int], window_size: int) -> RerankTask:
    candidates = tuple(
        replace(task.candidates[src - 1], original_index=pos)
        for pos, src in enumerate(segment, start=1)
    )
    return RerankTask(
        query=task.query,
        candidates=candidates,
        scheme=task.scheme,
        placeholder=task.placeholder,
        window_cap=window_size,
    )


def trace_to_json(ranking: CalibratedRanking) -> list[dict]:
    """Trace as plain JSON-serializable dicts, one entry per decode step."""
    steps = []
    for t in ranking.trace:
        steps.append(
            {
                "step": t.step_index,
                "remaining": sorted(t.remaining),
                "p_main": {str(i): t.p_main[i] for i in sorted(t.p_main)},
                "p_prior": (
                    None
                    if t.p_prior is None
                    else {str(i): t.p_prior[i] for i in sorted(t.p_prior)}
                ),
                "entropy": t.entropy_h,
                "alpha": t.alpha_k,
                "scores": {str(i): t.scores[i] for i in sorted(t.scores)},
                "chosen": t.chosen,
            }
        )
    return steps
