"""Prompt construction for ranking and for content-free prior estimation.

Two renderings share one code path: the main prompt carries the real
passage texts, the "empty" prompt swaps every passage for a placeholder
while leaving the query, the identifier labels, and all instruction text
byte-identical. That structural parity is what makes the empty prompt a
usable probe of slot preference rather than of content.

Chat-role wrapping (special tokens around system/user/assistant turns) is
deliberately left to the LM backend; this module emits plain text.
"""

from __future__ import annotations

import random
import string
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

from .domain import Candidate, RerankTask, render_label


class TemplateError(Exception):
    """A template slot could not be resolved while rendering."""


DEFAULT_FIXED_TEXT = "This is a placeholder"

_RANDOM_CHARS = string.ascii_letters + string.digits


class PlaceholderKind(str, Enum):
    """What to put in a passage slot when erasing its content.

    ``fixed_string`` is the default. The length-matched variants reproduce
    the character count of a reference passage: ``*_len1`` matches passage
    1, ``space_len_i`` matches each slot's own passage.
    """

    FIXED_STRING = "fixed_string"
    PASSAGE1_COPY = "passage1_copy"
    SINGLE_SPACE = "single_space"
    SPACE_X20 = "space_x20"
    RANDOM_X20 = "random_x20"
    SPACE_LEN1 = "space_len1"
    RANDOM_LEN1 = "random_len1"
    SPACE_LEN_I = "space_len_i"


@dataclass(frozen=True)
class PlaceholderPolicy:
    kind: PlaceholderKind = PlaceholderKind.FIXED_STRING
    fixed_text: str = DEFAULT_FIXED_TEXT
    rng_seed: int = 0


@dataclass(frozen=True)
class PromptTemplate:
    """Text skeleton of the ranking prompt.

    Recognised slots: ``{num}`` and ``{query}`` in the preamble/postamble,
    ``{label}`` and ``{text}`` (plus ``{num}``/``{query}``) in the passage
    line. Sections are joined with blank lines; empty sections are dropped.
    """

    system_text: str
    user_preamble: str
    passage_line_format: str
    user_postamble: str
    assistant_open: str = ""


DEFAULT_TEMPLATE = PromptTemplate(
    system_text=(
        "You are RankLLM, an intelligent assistant that can rank passages "
        "based on their relevancy to the query."
    ),
    user_preamble=(
        "I will provide you with {num} passages, each indicated by a numerical "
        "identifier []. Rank the passages based on their relevance to the "
        "search query: {query}."
    ),
    passage_line_format="[{label}] {text}",
    user_postamble=(
        "Search Query: {query}.\n\n"
        "Rank the {num} passages above based on their relevance to the search "
        "query. All the passages should be included and listed using "
        "identifiers, in descending order of relevance. The output format "
        "should be [] > [], e.g., [4] > [2]. Only respond with the ranking "
        "results, do not say any word or explain."
    ),
    assistant_open="",
)

_SECTION_NAMES = ("system", "preamble", "passage_line", "postamble", "assistant_open")


def _fill(fmt: str, **slots: Union[str, int]) -> str:
    try:
        return fmt.format(**slots)
    except (KeyError, IndexError, ValueError) as err:
        raise TemplateError(f"cannot resolve slot in {fmt!r}: {err}") from err


def make_placeholder(
    policy: PlaceholderPolicy, candidates: Sequence[Candidate], index: int
) -> str:
    """Placeholder text for the 1-based slot ``index``.

    Random variants draw ASCII letters and digits from a generator seeded
    by (policy seed, slot index), so each slot's string is deterministic
    and independent of rendering order.
    """
    if index < 1 or index > len(candidates):
        raise ValueError(f"slot {index} out of range 1..{len(candidates)}")
    kind = policy.kind
    if kind is PlaceholderKind.FIXED_STRING:
        return policy.fixed_text
    if kind is PlaceholderKind.PASSAGE1_COPY:
        return candidates[0].text
    if kind is PlaceholderKind.SINGLE_SPACE:
        return " "
    if kind is PlaceholderKind.SPACE_X20:
        return " " * 20
    if kind is PlaceholderKind.SPACE_LEN1:
        return " " * len(candidates[0].text)
    if kind is PlaceholderKind.SPACE_LEN_I:
        return " " * len(candidates[index - 1].text)
    if kind is PlaceholderKind.RANDOM_X20:
        return _random_text(policy.rng_seed, index, 20)
    if kind is PlaceholderKind.RANDOM_LEN1:
        return _random_text(policy.rng_seed, index, len(candidates[0].text))
    raise TemplateError(f"unknown placeholder kind {kind!r}")


def _random_text(seed: int, index: int, length: int) -> str:
    rng = random.Random(f"{seed}:{index}")
    return "".join(rng.choice(_RANDOM_CHARS) for _ in range(length))


def placeholder_texts(task: RerankTask) -> list[str]:
    """Placeholder string for every slot of a task, in slot order."""
    policy = task.placeholder or PlaceholderPolicy()
    return [
        make_placeholder(policy, task.candidates, i)
        for i in range(1, len(task.candidates) + 1)
    ]


def _render(task: RerankTask, template: PromptTemplate, texts: Sequence[str]) -> str:
    n = len(task.candidates)
    query = task.query.text
    lines = [
        _fill(
            template.passage_line_format,
            label=render_label(task.scheme, i),
            text=texts[i - 1],
            num=n,
            query=query,
        )
        for i in range(1, n + 1)
    ]
    sections = [
        template.system_text,
        _fill(template.user_preamble, num=n, query=query),
        "\n".join(lines),
        _fill(template.user_postamble, num=n, query=query),
        template.assistant_open,
    ]
    return "\n\n".join(s for s in sections if s)


def render_main_prompt(task: RerankTask, template: PromptTemplate = DEFAULT_TEMPLATE) -> str:
    """The standard ranking prompt with real passage contents."""
    return _render(task, template, [c.text for c in task.candidates])


def render_empty_prompt(task: RerankTask, template: PromptTemplate = DEFAULT_TEMPLATE) -> str:
    """The content-free twin: same structure, passages swapped for placeholders."""
    return _render(task, template, placeholder_texts(task))


def load_template(path: Union[str, Path]) -> PromptTemplate:
    """Read a template override file.

    The file is plain text split into named sections by header lines of the
    form ``[system]``, ``[preamble]``, ``[passage_line]``, ``[postamble]``,
    ``[assistant_open]``. Sections not present keep their default text.
    Leading/trailing blank lines inside a section are stripped.
    """
    raw = Path(path).read_text(encoding="utf-8")
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in raw.splitlines():
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1]
            if name in _SECTION_NAMES:
                current = sections.setdefault(name, [])
                continue
            raise TemplateError(f"unknown template section {stripped!r} in {path}")
        if current is None:
            if stripped:
                raise TemplateError(f"text before first section header in {path}")
            continue
        current.append(line)
    if not sections:
        raise TemplateError(f"no template sections found in {path}")

    def text_of(name: str, default: str) -> str:
        if name not in sections:
            return default
        return "\n".join(sections[name]).strip("\n")

    return PromptTemplate(
        system_text=text_of("system", DEFAULT_TEMPLATE.system_text),
        user_preamble=text_of("preamble", DEFAULT_TEMPLATE.user_preamble),
        passage_line_format=text_of("passage_line", DEFAULT_TEMPLATE.passage_line_format),
        user_postamble=text_of("postamble", DEFAULT_TEMPLATE.user_postamble),
        assistant_open=text_of("assistant_open", DEFAULT_TEMPLATE.assistant_open),
    )
