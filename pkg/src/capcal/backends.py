"""Scoring backends: a uniform "score this forced continuation" interface.

A backend answers one question: given a prompt and an already-generated
prefix, what log-probability does the model assign to each candidate
continuation, token by token? Decoding strategies are built entirely on
top of that primitive, so anything that can report teacher-forced
log-probs can drive the engine.

Two implementations ship here: an HTTP adapter for remote inference
servers, and a deterministic simulated LM whose slot preference and
per-document relevance are explicit knobs. The simulator is the test
oracle for every synthetic-bias experiment in the repo.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence, Union, runtime_checkable

import httpx

from .domain import RerankTask, TokenSeq, render_label
from .prompting import (
    DEFAULT_TEMPLATE,
    PromptTemplate,
    render_empty_prompt,
    render_main_prompt,
)


class BackendError(Exception):
    """Base class for scoring-backend failures."""


class BackendUnavailable(BackendError):
    """The backend could not be reached (network error, timeout, 5xx)."""


class TokenizationMismatch(BackendError):
    """The backend's tokenizer split a continuation across an unexpected
    boundary, so its per-token probabilities do not cover the label cleanly.
    Fatal for the request: re-segmenting silently would change what the
    joint probability means."""


class MalformedResponse(BackendError):
    """The backend answered, but not in the documented shape."""


class UnrecognizedPrompt(BackendError):
    """The simulated LM was asked to score a prompt it has no task for."""


@dataclass(frozen=True)
class ScoringRequest:
    """One teacher-forced scoring call.

    ``prefix`` is ranking text already emitted (may be empty); every
    continuation is scored as if appended right after it.
    """

    prompt: str
    prefix: str
    continuations: tuple[TokenSeq, ...]

    def __post_init__(self) -> None:
        if not self.continuations:
            raise ValueError("a scoring request needs at least one continuation")


@dataclass(frozen=True)
class ContinuationScore:
    """Per-token natural-log probabilities of one forced continuation."""

    continuation: TokenSeq
    token_logprobs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.token_logprobs) != len(self.continuation.tokens):
            raise ValueError(
                f"{len(self.token_logprobs)} logprobs for "
                f"{len(self.continuation.tokens)} tokens"
            )
        if any(lp > 0.0 for lp in self.token_logprobs):
            raise ValueError(f"log-probabilities must be <= 0, got {self.token_logprobs}")

    @property
    def total_logprob(self) -> float:
        return sum(self.token_logprobs)


@runtime_checkable
class ScoringBackend(Protocol):
    """What decoders need from a language model.

    Backends must be deterministic: identical requests return identical
    scores. They may also expose an optional ``register_task(task,
    template)`` hook; decoders call it (when present) with the task they
    are about to decode, which is how the simulated LM learns the ground
    truth behind a prompt. Real backends simply omit the hook.
    """

    def score_continuations(self, request: ScoringRequest) -> list[ContinuationScore]: ...

    def tokenize_label(self, label: str, terminator: str = "]") -> TokenSeq: ...


_LABEL_IN_BRACKETS = re.compile(r"\[([0-9A-Z]+)\]")


@dataclass(frozen=True)
class _PromptEntry:
    task: RerankTask
    content_free: bool


class SimulatedLM:
    """Deterministic stand-in model with explicit relevance and slot bias.

    Candidate logits are ``relevance[(query_id, doc_id)] + position_bias[slot]``
    on a main prompt and ``position_bias[slot]`` alone on a content-free
    prompt, divided by ``temperature`` and softmaxed over every candidate
    not yet chosen in the prefix (the constrained-decoding vocabulary), so a
    label's probability never depends on which continuations were queried.
    Labels already emitted in the prefix, and labels foreign to the task,
    score 0. Slots are the candidate's 1-based position in the task that
    produced the prompt; bias entries beyond the vector's length count as 0.

    Prompts are recognised by exact string match against tasks registered
    via :meth:`register_task`, which renders both the main and the
    content-free variant. If a task's passages happen to equal their
    placeholders the two renderings collide; the content-free reading wins,
    because a prompt without semantic content is content-free no matter how
    it was produced. Relevance pairs missing from the table score 0.

    The instance is safe to share across threads; registration holds a lock,
    scoring only reads.
    """

    def __init__(
        self,
        relevance: Optional[Mapping[tuple[str, str], float]] = None,
        position_bias: Sequence[float] = (),
        temperature: float = 1.0,
        seed: int = 0,
    ) -> None:
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.relevance = dict(relevance or {})
        self.position_bias = tuple(float(b) for b in position_bias)
        self.temperature = float(temperature)
        self.seed = seed
        self._prompts: dict[str, _PromptEntry] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_dict(cls, spec: Mapping[str, object]) -> "SimulatedLM":
        relevance: dict[tuple[str, str], float] = {}
        for qid, docs in dict(spec.get("relevance", {})).items():  # type: ignore[arg-type]
            for doc_id, logit in dict(docs).items():
                relevance[(str(qid), str(doc_id))] = float(logit)
        return cls(
            relevance=relevance,
            position_bias=[float(b) for b in spec.get("position_bias", [])],  # type: ignore[union-attr]
            temperature=float(spec.get("temperature", 1.0)),  # type: ignore[arg-type]
            seed=int(spec.get("seed", 0)),  # type: ignore[arg-type]
        )

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SimulatedLM":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def register_task(self, task: RerankTask, template: PromptTemplate = DEFAULT_TEMPLATE) -> None:
        main = render_main_prompt(task, template)
        empty = render_empty_prompt(task, template)
        with self._lock:
            self._prompts[main] = _PromptEntry(task, content_free=False)
            # registered second so it wins when the renderings collide
            self._prompts[empty] = _PromptEntry(task, content_free=True)

    def tokenize_label(self, label: str, terminator: str = "]") -> TokenSeq:
        tokens = (label, terminator) if terminator else (label,)
        return TokenSeq(tokens=tokens, rendered=label + terminator)

    def score_continuations(self, request: ScoringRequest) -> list[ContinuationScore]:
        entry = self._prompts.get(request.prompt)
        if entry is None:
            raise UnrecognizedPrompt(
                "prompt was not produced from any registered task "
                f"(head: {request.prompt[:60]!r})"
            )
        task = entry.task
        by_label = {
            render_label(task.scheme, c.original_index): c.original_index
            for c in task.candidates
        }

        chosen: set[int] = set()
        for lab in _LABEL_IN_BRACKETS.findall(request.prefix):
            idx = by_label.get(lab)
            if idx is not None:
                chosen.add(idx)

        requested: list[tuple[TokenSeq, Optional[int]]] = []
        for seq in request.continuations:
            idx = self._resolve_label(seq.rendered, by_label)
            requested.append((seq, idx))

        # the model is constrained to the not-yet-ranked identifiers, so the
        # softmax runs over that whole set no matter which labels were asked
        active = [
            c.original_index for c in task.candidates if c.original_index not in chosen
        ]
        probs = self._slot_probs(task, entry.content_free, active)

        scores: list[ContinuationScore] = []
        for seq, idx in requested:
            p = probs.get(idx, 0.0) if idx is not None else 0.0
            logp = math.log(p) if p > 0.0 else float("-inf")
            # joint identifier probability sits on the first token; the
            # terminator is emitted with probability 1 in the simulator
            logprobs = (logp,) + (0.0,) * (len(seq.tokens) - 1)
            scores.append(ContinuationScore(continuation=seq, token_logprobs=logprobs))
        return scores

    @staticmethod
    def _resolve_label(rendered: str, by_label: Mapping[str, int]) -> Optional[int]:
        # longest-prefix match so "10]" resolves to "10", never "1"
        best: Optional[str] = None
        for lab in by_label:
            if rendered == lab or rendered.startswith(lab):
                if best is None or len(lab) > len(best):
                    best = lab
        return by_label[best] if best is not None else None

    def _slot_probs(
        self, task: RerankTask, content_free: bool, active: Sequence[int]
    ) -> dict[int, float]:
        if not active:
            return {}
        qid = task.query.id
        logits: dict[int, float] = {}
        for idx in active:
            cand = task.candidates[idx - 1]
            bias = self.position_bias[idx - 1] if idx - 1 < len(self.position_bias) else 0.0
            logit = bias
            if not content_free:
                logit += self.relevance.get((qid, cand.doc_id), 0.0)
            logits[idx] = logit / self.temperature
        peak = max(logits.values())
        expd = {idx: math.exp(z - peak) for idx, z in logits.items()}
        total = sum(expd.values())
        return {idx: e / total for idx, e in expd.items()}


class HttpScoringBackend:
    """Adapter for a remote scoring endpoint.

    Wire contract (all bodies are single-line JSON objects):

    ``POST {base}/score``
        request  ``{"prompt": str, "prefix": str, "continuations": [str, ...]}``
        response one JSON line per continuation, in request order:
        ``{"tokens": [str, ...], "token_logprobs": [float, ...]}``

    ``POST {base}/tokenize``
        request ``{"text": str}``, response ``{"tokens": [str, ...]}``

    ``mode="completions"`` serves backends that only expose echo-logprobs
    completions: the adapter sends one teacher-forced request per
    continuation to ``POST {base}/completions`` with
    ``{"text": prompt+prefix+continuation, "echo_logprobs": true}`` and takes
    the response's tail tokens that join exactly to the continuation. If no
    clean tail exists the prefix/continuation boundary was merged by the
    tokenizer and the request fails with :class:`TokenizationMismatch`.

    Transport errors and 5xx responses are retried ``retries`` times before
    raising :class:`BackendUnavailable`. Scoring must be deterministic on
    the server side (greedy/temperature-free); the adapter never samples.
    """

    def __init__(
        self,
        base_url: str,
        auth_env: str = "CAPCAL_HTTP_TOKEN",
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        mode: str = "score",
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        if mode not in ("score", "completions"):
            raise ValueError(f"unknown adapter mode {mode!r}")
        self.mode = mode
        self.retries = retries
        self.backoff = backoff
        headers = {}
        token = os.environ.get(auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=base_url, timeout=timeout, headers=headers, transport=transport
        )
        self._gate = threading.BoundedSemaphore(max_in_flight)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "HttpScoringBackend":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _post(self, path: str, payload: Mapping[str, object]) -> httpx.Response:
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt and self.backoff:
                time.sleep(self.backoff * attempt)
            try:
                with self._gate:
                    resp = self._client.post(path, json=payload)
            except httpx.TransportError as err:
                last = err
                continue
            if resp.status_code >= 500:
                last = BackendUnavailable(f"{path} returned {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise MalformedResponse(f"{path} returned {resp.status_code}: {resp.text[:200]}")
            return resp
        raise BackendUnavailable(
            f"{path} unreachable after {self.retries + 1} attempts: {last}"
        ) from last

    @staticmethod
    def _parse_json_lines(text: str, path: str) -> list[dict]:
        rows = []
        for line in text.splitlines():
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise MalformedResponse(f"bad JSON line from {path}: {err}") from err
        return rows

    @staticmethod
    def _sanitize_logprobs(values: Sequence[object]) -> tuple[float, ...]:
        out = []
        for v in values:
            lp = float(v)  # type: ignore[arg-type]
            if lp > 1e-6:
                raise MalformedResponse(f"positive log-probability {lp} in response")
            out.append(min(lp, 0.0))
        return tuple(out)

    def tokenize_label(self, label: str, terminator: str = "]") -> TokenSeq:
        text = label + terminator
        resp = self._post("/tokenize", {"text": text})
        rows = self._parse_json_lines(resp.text, "/tokenize")
        if len(rows) != 1 or "tokens" not in rows[0]:
            raise MalformedResponse("/tokenize must return one {'tokens': [...]} line")
        tokens = tuple(str(t) for t in rows[0]["tokens"])
        if "".join(tokens) != text:
            raise TokenizationMismatch(
                f"tokenizer split {text!r} into {tokens!r}, which does not join back"
            )
        return TokenSeq(tokens=tokens, rendered=text)

    def score_continuations(self, request: ScoringRequest) -> list[ContinuationScore]:
        if self.mode == "completions":
            return [self._score_one_completion(request, seq) for seq in request.continuations]
        payload = {
            "prompt": request.prompt,
            "prefix": request.prefix,
            "continuations": [seq.rendered for seq in request.continuations],
        }
        resp = self._post("/score", payload)
        rows = self._parse_json_lines(resp.text, "/score")
        if len(rows) != len(request.continuations):
            raise MalformedResponse(
                f"/score returned {len(rows)} rows for "
                f"{len(request.continuations)} continuations"
            )
        scores = []
        for seq, row in zip(request.continuations, rows):
            try:
                tokens = tuple(str(t) for t in row["tokens"])
                logprobs = self._sanitize_logprobs(row["token_logprobs"])
            except (KeyError, TypeError, ValueError) as err:
                raise MalformedResponse(f"bad /score row {row!r}: {err}") from err
            if "".join(tokens) != seq.rendered:
                raise TokenizationMismatch(
                    f"server tokenized {seq.rendered!r} as {tokens!r}"
                )
            if len(logprobs) != len(tokens):
                raise MalformedResponse("token/logprob length mismatch in /score row")
            scores.append(
                ContinuationScore(
                    continuation=TokenSeq(tokens=tokens, rendered=seq.rendered),
                    token_logprobs=logprobs,
                )
            )
        return scores

    def _score_one_completion(self, request: ScoringRequest, seq: TokenSeq) -> ContinuationScore:
        full = request.prompt + request.prefix + seq.rendered
        resp = self._post("/completions", {"text": full, "echo_logprobs": True})
        rows = self._parse_json_lines(resp.text, "/completions")
        if len(rows) != 1:
            raise MalformedResponse("/completions must return exactly one JSON line")
        row = rows[0]
        try:
            tokens = [str(t) for t in row["tokens"]]
            logprobs = self._sanitize_logprobs(row["token_logprobs"])
        except (KeyError, TypeError, ValueError) as err:
            raise MalformedResponse(f"bad /completions row: {err}") from err
        if len(logprobs) != len(tokens):
            raise MalformedResponse("token/logprob length mismatch in /completions row")

        # smallest token suffix that reproduces the continuation exactly
        tail = ""
        for i in range(len(tokens) - 1, -1, -1):
            tail = tokens[i] + tail
            if tail == seq.rendered:
                return ContinuationScore(
                    continuation=TokenSeq(tokens=tuple(tokens[i:]), rendered=seq.rendered),
                    token_logprobs=logprobs[i:],
                )
            if len(tail) > len(seq.rendered):
                break
        raise TokenizationMismatch(
            f"no token suffix joins to {seq.rendered!r}; the tokenizer merged "
            "the continuation with the preceding text"
        )
