"""TREC-style evaluation: qrels and run files, NDCG@k, method comparison.

File formats follow the community conventions exactly:

qrels   ``qid 0 docid rel`` (whitespace-separated; negative grades are
        clamped to 0 with a warning)
run     ``qid Q0 docid rank score tag`` with per-query ranks 1..m
        contiguous and scores non-increasing in rank

NDCG uses the exponential gain ``2^rel - 1`` and ``log2(rank + 1)``
discount. Queries without a positive judgment are excluded from the mean;
judged queries missing from a run score 0(a run is responsible for every
judged query, the complete-judgments convention used for TREC DL runs).
Unjudged documents count as relevance 0.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class EvalError(Exception):
    """Base class for evaluation-harness failures."""


class ParseError(EvalError):
    def __init__(self, path: PathLike, line_no: int, message: str) -> None:
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class DuplicateJudgment(EvalError):
    pass


class NonContiguousRanks(EvalError):
    pass


class QuerySetMismatch(EvalError):
    pass


@dataclass
class Qrels:
    """Relevance judgments keyed by (query_id, doc_id)."""

    judgments: dict[tuple[str, str], int] = field(default_factory=dict)

    @property
    def queries(self) -> set[str]:
        return {qid for qid, _ in self.judgments}

    def grades_for(self, query_id: str) -> dict[str, int]:
        return {
            doc: rel for (qid, doc), rel in self.judgments.items() if qid == query_id
        }


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str


@dataclass
class RunFile:
    """A ranked output list in TREC run format."""

    entries: list[RunEntry] = field(default_factory=list)

    def by_query(self) -> dict[str, list[RunEntry]]:
        grouped: dict[str, list[RunEntry]] = {}
        for entry in self.entries:
            grouped.setdefault(entry.query_id, []).append(entry)
        for rows in grouped.values():
            rows.sort(key=lambda e: e.rank)
        return grouped

    def validate(self) -> None:
        seen: set[tuple[str, str]] = set()
        for entry in self.entries:
            key = (entry.query_id, entry.doc_id)
            if key in seen:
                raise EvalError(f"duplicate document {key} in run")
            seen.add(key)
        for qid, rows in self.by_query().items():
            ranks = [e.rank for e in rows]
            if ranks != list(range(1, len(rows) + 1)):
                raise NonContiguousRanks(f"query {qid}: ranks {ranks} are not 1..{len(rows)}")
            scores = [e.score for e in rows]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise EvalError(f"query {qid}: scores increase with rank")


@dataclass
class EvalReport:
    per_query: dict[str, float]
    mean: float
    metric: str
    method_tag: str


def parse_qrels(path: PathLike) -> Qrels:
    judgments: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(path, line_no, f"expected 'qid iter docid rel', got {len(parts)} fields")
            qid, _, doc_id, rel_text = parts
            try:
                rel = int(rel_text)
            except ValueError:
                raise ParseError(path, line_no, f"relevance grade {rel_text!r} is not an integer") from None
            if rel < 0:
                logger.warning("%s:%d: clamping negative grade %d to 0", path, line_no, rel)
                rel = 0
            key = (qid, doc_id)
            if key in judgments:
                raise DuplicateJudgment(f"{path}:{line_no}: duplicate judgment for {key}")
            judgments[key] = rel
    return Qrels(judgments)


def write_qrels(qrels: Qrels, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, doc_id), rel in qrels.judgments.items():
            fh.write(f"{qid} 0 {doc_id} {rel}\n")


def parse_run(path: PathLike) -> RunFile:
    entries: list[RunEntry] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(path, line_no, f"expected 'qid Q0 docid rank score tag', got {len(parts)} fields")
            qid, _, doc_id, rank_text, score_text, tag = parts
            try:
                rank = int(rank_text)
                score = float(score_text)
            except ValueError:
                raise ParseError(path, line_no, f"bad rank/score in {line!r}") from None
            entries.append(RunEntry(qid, doc_id, rank, score, tag))
    run = RunFile(entries)
    run.validate()
    return run


def write_run(run: RunFile, path: PathLike) -> None:
    """Write TREC run lines; scores are printed with 6 decimals."""
    for entry in run.entries:
        for text_field in (entry.query_id, entry.doc_id, entry.tag):
            if not text_field or any(ch.isspace() for ch in text_field):
                raise ValueError(f"run field {text_field!r} is empty or contains whitespace")
    with open(path, "w", encoding="utf-8") as fh:
        for entry in run.entries:
            fh.write(
                f"{entry.query_id} Q0 {entry.doc_id} {entry.rank} "
                f"{entry.score:.6f} {entry.tag}\n"
            )


def runs_equal(a: RunFile, b: RunFile, ignore_tag: bool = False) -> bool:
    def strip(entries: Iterable[RunEntry]):
        return [
            (e.query_id, e.doc_id, e.rank, e.score) if ignore_tag else e
            for e in entries
        ]

    return strip(a.entries) == strip(b.entries)


def _dcg(grades: Sequence[int]) -> float:
    return sum(
        (2**rel - 1) / math.log2(pos + 2) for pos, rel in enumerate(grades)
    )


def ndcg_at_k(run: RunFile, qrels: Qrels, k: int) -> EvalReport:
    """NDCG@k per query and averaged.

    Only queries with at least one positive judgment enter the report; for
    those, a run that omits the query entirely scores 0.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    by_query = run.by_query()
    per_query: dict[str, float] = {}
    for qid in sorted(qrels.queries):
        grades = qrels.grades_for(qid)
        ideal = sorted(grades.values(), reverse=True)[:k]
        idcg = _dcg(ideal)
        if idcg <= 0.0:
            continue
        ranked = [grades.get(e.doc_id, 0) for e in by_query.get(qid, [])[:k]]
        per_query[qid] = _dcg(ranked) / idcg
    mean = statistics.fmean(per_query.values()) if per_query else 0.0
    tag = run.entries[0].tag if run.entries else ""
    return EvalReport(per_query=per_query, mean=mean, metric=f"ndcg@{k}", method_tag=tag)


@dataclass
class MethodComparison:
    """Means per method with deltas against the first (baseline) method."""

    metric: str
    rows: list[dict]

    def to_json(self) -> dict:
        return {"metric": self.metric, "methods": self.rows}

    def render_text(self) -> str:
        has_delta = any(row.get("delta") is not None for row in self.rows)
        name_w = max(len("method"), *(len(r["method"]) for r in self.rows))
        header = f"{'method':<{name_w}}  {self.metric:>10}"
        if has_delta:
            header += f"  {'delta':>8}"
        lines = [header]
        for row in self.rows:
            line = f"{row['method']:<{name_w}}  {row['mean']:>10.4f}"
            if has_delta and row.get("delta") is not None:
                line += f"  {row['delta']:>+8.4f}"
            lines.append(line)
        return "\n".join(lines)


def compare_methods(reports: Sequence[EvalReport]) -> MethodComparison:
    """Tabulate method means against the first report.

    All reports must share the metric and the exact evaluated query set;
    comparing across different query pools would make the deltas
    meaningless.
    """
    if not reports:
        raise ValueError("nothing to compare")
    metric = reports[0].metric
    if any(r.metric != metric for r in reports):
        raise ValueError(f"mixed metrics: {sorted({r.metric for r in reports})}")
    base_queries = set(reports[0].per_query)
    for report in reports[1:]:
        if set(report.per_query) != base_queries:
            missing = base_queries.symmetric_difference(report.per_query)
            raise QuerySetMismatch(
                f"report {report.method_tag!r} evaluates a different query set "
                f"(disagreement on {sorted(missing)[:5]})"
            )
    rows = []
    for pos, report in enumerate(reports):
        row = {"method": report.method_tag or f"run{pos}", "mean": report.mean}
        if len(reports) > 1:
            row["delta"] = None if pos == 0 else report.mean - reports[0].mean
        rows.append(row)
    return MethodComparison(metric=metric, rows=rows)


@dataclass(frozen=True)
class TaskRecord:
    """One ingested query: id, text, and candidates in first-stage order."""

    query_id: str
    query_text: str
    candidates: tuple[tuple[str, str], ...]  # (doc_id, text)


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def load_task_file(path: PathLike) -> list[TaskRecord]:
    """Read a JSONL task file.

    Each line: ``{"query_id": ..., "query_text": ...,
    "candidates": [{"doc_id": ..., "text": ...}, ...]}``. Candidate order is
    the first-stage retrieval order. All texts are whitespace-normalized
    (runs of whitespace collapse to single spaces).
    """
    records: list[TaskRecord] = []
    seen_queries: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(path, line_no, f"bad JSON: {err}") from None
            try:
                qid = str(obj["query_id"])
                qtext = _normalize_ws(str(obj["query_text"]))
                cands = [
                    (str(c["doc_id"]), _normalize_ws(str(c["text"])))
                    for c in obj["candidates"]
                ]
            except (KeyError, TypeError) as err:
                raise ParseError(path, line_no, f"missing field: {err}") from None
            if not qtext:
                raise ParseError(path, line_no, f"query {qid!r} has empty text")
            if qid in seen_queries:
                raise ParseError(path, line_no, f"duplicate query_id {qid!r}")
            doc_ids = [d for d, _ in cands]
            if len(set(doc_ids)) != len(doc_ids):
                raise ParseError(path, line_no, f"duplicate doc_id under query {qid!r}")
            seen_queries.add(qid)
            records.append(TaskRecord(query_id=qid, query_text=qtext, candidates=tuple(cands)))
    return records
