"""Value types shared across the reranking engine.

Everything here is an immutable value object. Candidate positions are
1-based throughout, matching the "[1]", "[2]" convention of ranking
prompts; any 0-based bookkeeping stays private to the code that needs it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Mapping, Optional, Union

if TYPE_CHECKING:
    from .prompting import PlaceholderPolicy

#: Largest candidate list a single prompt is allowed to carry by default.
#: Longer lists go through sliding-window orchestration instead.
DEFAULT_WINDOW_CAP = 20


class SchemeKind(str, Enum):
    """How candidate slots are labelled inside the prompt."""

    NUMERIC = "numeric"
    ALPHABETIC = "alphabetic"


@dataclass(frozen=True)
class IdentifierScheme:
    """Injective mapping from candidate positions to prompt labels."""

    kind: SchemeKind = SchemeKind.NUMERIC

    def render(self, index: int) -> str:
        return render_label(self, index)


def render_label(scheme: Union[IdentifierScheme, SchemeKind, str], index: int) -> str:
    """Label for a 1-based candidate position.

    Numeric slots render as decimal digits. Alphabetic slots use bijective
    base-26 ("A".."Z", then "AA", "AB", ...), which extends the usual
    single-letter labels past 26 candidates without collisions.
    """
    if index < 1:
        raise ValueError(f"candidate positions are 1-based, got {index}")
    kind = scheme.kind if isinstance(scheme, IdentifierScheme) else SchemeKind(scheme)
    if kind is SchemeKind.NUMERIC:
        return str(index)
    n = index
    parts: list[str] = []
    while n > 0:
        n, r = divmod(n - 1, 26)
        parts.append(chr(ord("A") + r))
    return "".join(reversed(parts))


@dataclass(frozen=True)
class Query:
    """A search query. Ids must be unique within a dataset (checked at ingestion)."""

    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"query {self.id!r} has empty text")


@dataclass(frozen=True)
class Candidate:
    """One document in a rerank list.

    ``original_index`` is the document's 1-based slot in the input list and
    stays attached to the document through shuffles and window slices.
    """

    doc_id: str
    text: str
    original_index: int

    def __post_init__(self) -> None:
        if self.original_index < 1:
            raise ValueError(f"original_index must be >= 1, got {self.original_index}")


@dataclass(frozen=True)
class RerankTask:
    """A query plus its ordered candidate list and prompt policies.

    ``candidates[j]`` must carry ``original_index == j + 1``, so the list
    order and the index labels can never disagree.
    """

    query: Query
    candidates: tuple[Candidate, ...]
    scheme: IdentifierScheme = IdentifierScheme()
    placeholder: Optional["PlaceholderPolicy"] = None
    window_cap: int = DEFAULT_WINDOW_CAP

    def __post_init__(self) -> None:
        n = len(self.candidates)
        if n < 2:
            raise ValueError(f"a rerank task needs at least 2 candidates, got {n}")
        if n > self.window_cap:
            raise ValueError(
                f"{n} candidates exceed the window cap of {self.window_cap}; "
                "use sliding-window orchestration for longer lists"
            )
        for j, cand in enumerate(self.candidates):
            if cand.original_index != j + 1:
                raise ValueError(
                    f"candidate at list position {j + 1} carries original_index "
                    f"{cand.original_index}"
                )
        doc_ids = [c.doc_id for c in self.candidates]
        if len(set(doc_ids)) != n:
            raise ValueError(f"duplicate doc_ids in task for query {self.query.id!r}")

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class Permutation:
    """A ranking: original candidate indices ordered most-relevant first."""

    order: tuple[int, ...]


def validate_permutation(perm: Permutation, n: int) -> bool:
    """True iff ``perm.order`` is a bijection on 1..n."""
    return sorted(perm.order) == list(range(1, n + 1))


@dataclass(frozen=True)
class TokenSeq:
    """A tokenized continuation as the backend tokenizer sees it.

    Tokens are either surface strings or backend token ids. When they are
    strings, their concatenation must reproduce ``rendered`` exactly; token
    ids cannot be checked locally and are accepted as-is.
    """

    tokens: tuple[Union[int, str], ...]
    rendered: str

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError("a continuation needs at least one token")
        if all(isinstance(t, str) for t in self.tokens):
            joined = "".join(self.tokens)  # type: ignore[arg-type]
            if joined != self.rendered:
                raise ValueError(
                    f"token surfaces {self.tokens!r} join to {joined!r}, "
                    f"not {self.rendered!r}"
                )


@dataclass(frozen=True)
class StepTrace:
    """Everything the decoder knew at one greedy step.

    ``p_main``/``p_prior`` hold raw joint identifier probabilities keyed by
    original index (prior is None for uncalibrated decodes). ``entropy_h``
    is in nats over the normalized main distribution, ``alpha_k`` the
    penalty weight actually applied, and ``scores`` the values the argmax
    ran over.
    """

    step_index: int
    remaining: frozenset[int]
    p_main: Mapping[int, float]
    p_prior: Optional[Mapping[int, float]]
    entropy_h: float
    alpha_k: float
    scores: Mapping[int, float]
    chosen: int

    def __post_init__(self) -> None:
        if self.chosen not in self.remaining:
            raise ValueError(
                f"step {self.step_index} chose {self.chosen}, "
                f"not in remaining set {sorted(self.remaining)}"
            )
