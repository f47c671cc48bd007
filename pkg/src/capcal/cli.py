"""Operator command line.

Subcommands
    rerank    decode a JSONL task file and write a TREC run
    prior     inspect the content-free slot distribution for one query
    explain   dump the full per-step decode trace for one query as JSON
    eval      score a run against qrels (ndcg@k)
    compare   tabulate several runs against one qrels file

Settings resolve with precedence CLI flags > environment variables >
config file (JSON) > built-in defaults. Recognised environment variables:
CAPCAL_BACKEND_KIND, CAPCAL_ENDPOINT, CAPCAL_SIM_SPEC, CAPCAL_TASKS,
CAPCAL_RUN_OUT, CAPCAL_BETA, CAPCAL_PRIOR_MODE, CAPCAL_SCHEME,
CAPCAL_PLACEHOLDER, CAPCAL_SEED.

Exit codes: 0 success, 1 configuration or usage error, 2 backend failure,
3 file io or parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from .backends import BackendError, HttpScoringBackend, ScoringBackend, SimulatedLM
from .baselines import Aggregation, PscConfig, psc_rerank
from .calibration import (
    CalibratedRanking,
    CalibrationConfig,
    PriorMode,
    _permutation_of,
    decode_base,
    decode_capcal,
    sliding_window_rerank,
    trace_to_json,
)
from .domain import (
    Candidate,
    IdentifierScheme,
    Permutation,
    Query,
    RerankTask,
    SchemeKind,
    render_label,
)
from .evaluation import (
    EvalError,
    RunEntry,
    RunFile,
    TaskRecord,
    compare_methods,
    load_task_file,
    ndcg_at_k,
    parse_qrels,
    parse_run,
    write_run,
)
from .prompting import (
    DEFAULT_TEMPLATE,
    PlaceholderKind,
    PlaceholderPolicy,
    PromptTemplate,
    load_template,
)

logger = logging.getLogger(__name__)

SCORE_STEP = 1e-6


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 1."""


class UnknownQuery(ConfigError):
    """The requested query id does not exist in the task file."""


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "simulated"
    endpoint: str = ""
    spec_file: str = ""
    auth_env: str = "CAPCAL_HTTP_TOKEN"
    timeout: float = 30.0
    retries: int = 2
    max_in_flight: int = 4
    mode: str = "score"


@dataclass(frozen=True)
class WindowConfig:
    size: int = 20
    stride: int = 10


@dataclass(frozen=True)
class CliConfig:
    backend: BackendConfig
    calibration: CalibrationConfig
    psc: PscConfig
    window: WindowConfig
    placeholder: PlaceholderPolicy
    scheme: SchemeKind
    template_file: str = ""
    tasks: str = ""
    out: str = "capcal.run"
    seed: int = 0
    workers: int = 1


_ENV_MAP = {
    "CAPCAL_BACKEND_KIND": ("backend", "kind"),
    "CAPCAL_ENDPOINT": ("backend", "endpoint"),
    "CAPCAL_SIM_SPEC": ("backend", "spec_file"),
    "CAPCAL_TASKS": ("tasks",),
    "CAPCAL_RUN_OUT": ("out",),
    "CAPCAL_BETA": ("calibration", "beta"),
    "CAPCAL_PRIOR_MODE": ("calibration", "prior_mode"),
    "CAPCAL_SCHEME": ("scheme",),
    "CAPCAL_PLACEHOLDER": ("placeholder", "kind"),
    "CAPCAL_SEED": ("seed",),
}

_FLAG_MAP = {
    "backend": ("backend", "kind"),
    "endpoint": ("backend", "endpoint"),
    "sim_spec": ("backend", "spec_file"),
    "auth_env": ("backend", "auth_env"),
    "timeout": ("backend", "timeout"),
    "retries": ("backend", "retries"),
    "max_in_flight": ("backend", "max_in_flight"),
    "adapter_mode": ("backend", "mode"),
    "template": ("template_file",),
    "tasks": ("tasks",),
    "out": ("out",),
    "scheme": ("scheme",),
    "placeholder": ("placeholder", "kind"),
    "placeholder_text": ("placeholder", "fixed_text"),
    "placeholder_seed": ("placeholder", "rng_seed"),
    "beta": ("calibration", "beta"),
    "prior_mode": ("calibration", "prior_mode"),
    "terminator": ("calibration", "terminator"),
    "raw_prior": ("calibration", "raw_prior"),
    "psc_k": ("psc", "k_permutations"),
    "psc_seed": ("psc", "seed"),
    "psc_aggregation": ("psc", "aggregation"),
    "window_size": ("window", "size"),
    "window_stride": ("window", "stride"),
    "seed": ("seed",),
    "workers": ("workers",),
}


def _defaults() -> dict:
    return {
        "backend": {
            "kind": "simulated",
            "endpoint": "",
            "spec_file": "",
            "auth_env": "CAPCAL_HTTP_TOKEN",
            "timeout": 30.0,
            "retries": 2,
            "max_in_flight": 4,
            "mode": "score",
        },
        "calibration": {
            "beta": 1.0,
            "prior_mode": "lockstep",
            "terminator": "]",
            "epsilon": 1e-12,
            "raw_prior": False,
        },
        "psc": {"k_permutations": 10, "seed": 0, "aggregation": "mean_rank"},
        "window": {"size": 20, "stride": 10},
        "placeholder": {"kind": "fixed_string", "fixed_text": "This is a placeholder", "rng_seed": 0},
        "scheme": "numeric",
        "template_file": "",
        "tasks": "",
        "out": "capcal.run",
        "seed": 0,
        "workers": 1,
    }


def _set_path(tree: dict, path: tuple[str, ...], value: object) -> None:
    node = tree
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value


def resolve_config(args: argparse.Namespace) -> CliConfig:
    """Merge defaults, config file, environment, and CLI flags."""
    tree = _defaults()

    config_path = getattr(args, "config", None) or os.environ.get("CAPCAL_CONFIG", "")
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config file {config_path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {config_path} is not valid JSON: {err}") from err
        for key, value in loaded.items():
            if key not in tree:
                raise ConfigError(f"unknown config key {key!r} in {config_path}")
            if isinstance(tree[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key {key!r} must be an object")
                for sub, sub_value in value.items():
                    if sub not in tree[key]:
                        raise ConfigError(f"unknown config key {key}.{sub!r}")
                    tree[key][sub] = sub_value
            else:
                tree[key] = value

    for env_name, path in _ENV_MAP.items():
        raw = os.environ.get(env_name)
        if raw is not None and raw != "":
            _set_path(tree, path, raw)

    for flag, path in _FLAG_MAP.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set_path(tree, path, value)

    try:
        backend = BackendConfig(
            kind=str(tree["backend"]["kind"]),
            endpoint=str(tree["backend"]["endpoint"]),
            spec_file=str(tree["backend"]["spec_file"]),
            auth_env=str(tree["backend"]["auth_env"]),
            timeout=float(tree["backend"]["timeout"]),
            retries=int(tree["backend"]["retries"]),
            max_in_flight=int(tree["backend"]["max_in_flight"]),
            mode=str(tree["backend"]["mode"]),
        )
        calibration = CalibrationConfig(
            beta=float(tree["calibration"]["beta"]),
            prior_mode=PriorMode(str(tree["calibration"]["prior_mode"])),
            terminator=str(tree["calibration"]["terminator"]),
            epsilon=float(tree["calibration"]["epsilon"]),
            raw_prior=bool(tree["calibration"]["raw_prior"]),
        )
        psc = PscConfig(
            k_permutations=int(tree["psc"]["k_permutations"]),
            seed=int(tree["psc"]["seed"]),
            aggregation=Aggregation(str(tree["psc"]["aggregation"])),
        )
        window = WindowConfig(
            size=int(tree["window"]["size"]), stride=int(tree["window"]["stride"])
        )
        placeholder = PlaceholderPolicy(
            kind=PlaceholderKind(str(tree["placeholder"]["kind"])),
            fixed_text=str(tree["placeholder"]["fixed_text"]),
            rng_seed=int(tree["placeholder"]["rng_seed"]),
        )
        cfg = CliConfig(
            backend=backend,
            calibration=calibration,
            psc=psc,
            window=window,
            placeholder=placeholder,
            scheme=SchemeKind(str(tree["scheme"])),
            template_file=str(tree["template_file"]),
            tasks=str(tree["tasks"]),
            out=str(tree["out"]),
            seed=int(tree["seed"]),
            workers=int(tree["workers"]),
        )
    except (ValueError, KeyError) as err:
        raise ConfigError(f"invalid configuration value: {err}") from err

    if cfg.backend.kind not in ("http", "simulated"):
        raise ConfigError(f"backend kind must be 'http' or 'simulated', got {cfg.backend.kind!r}")
    if cfg.backend.kind == "http" and not cfg.backend.endpoint:
        raise ConfigError("http backend requires --endpoint")
    if cfg.backend.kind == "simulated" and cfg.backend.spec_file:
        if not Path(cfg.backend.spec_file).is_file():
            raise ConfigError(f"simulated backend spec file not found: {cfg.backend.spec_file}")
    if cfg.template_file and not Path(cfg.template_file).is_file():
        raise ConfigError(f"template file not found: {cfg.template_file}")
    if cfg.window.size < 2 or not 1 <= cfg.window.stride < cfg.window.size:
        raise ConfigError(
            f"bad window config: size={cfg.window.size} stride={cfg.window.stride}"
        )
    if cfg.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    return cfg


def _close_backend(backend: ScoringBackend) -> None:
    close = getattr(backend, "close", None)
    if close is not None:
        close()


def build_backend(cfg: CliConfig) -> ScoringBackend:
    if cfg.backend.kind == "simulated":
        if cfg.backend.spec_file:
            return SimulatedLM.from_file(cfg.backend.spec_file)
        return SimulatedLM()
    return HttpScoringBackend(
        base_url=cfg.backend.endpoint,
        auth_env=cfg.backend.auth_env,
        timeout=cfg.backend.timeout,
        retries=cfg.backend.retries,
        max_in_flight=cfg.backend.max_in_flight,
        mode=cfg.backend.mode,
    )


def _load_template(cfg: CliConfig) -> PromptTemplate:
    if cfg.template_file:
        return load_template(cfg.template_file)
    return DEFAULT_TEMPLATE


def _task_of(record: TaskRecord, cfg: CliConfig) -> Optional[RerankTask]:
    n = len(record.candidates)
    if n < 2:
        return None
    candidates = tuple(
        Candidate(doc_id=doc_id, text=text, original_index=pos)
        for pos, (doc_id, text) in enumerate(record.candidates, start=1)
    )
    return RerankTask(
        query=Query(id=record.query_id, text=record.query_text),
        candidates=candidates,
        scheme=IdentifierScheme(cfg.scheme),
        placeholder=cfg.placeholder,
        window_cap=max(n, cfg.window.size),
    )


def _strictly_decreasing(values: Sequence[float]) -> list[float]:
    out: list[float] = []
    prev = math.inf
    for v in values:
        v = min(v, prev - SCORE_STEP)
        out.append(v)
        prev = v
    return out


def _rank_one(
    backend: ScoringBackend,
    task: RerankTask,
    template: PromptTemplate,
    cfg: CliConfig,
    method: str,
    calibration: CalibrationConfig,
) -> tuple[Permutation, list[float]]:
    """Returns the permutation and raw per-rank score values."""

    def single(b: ScoringBackend, t: RerankTask, tpl: PromptTemplate) -> CalibratedRanking:
        if method == "capcal":
            return decode_capcal(b, t, tpl, calibration)
        return decode_base(b, t, tpl)

    def full(b: ScoringBackend, t: RerankTask, tpl: PromptTemplate):
        if len(t) > cfg.window.size:
            return sliding_window_rerank(b, t, tpl, cfg.window.size, cfg.window.stride, single)
        return single(b, t, tpl)

    if method == "psc":
        perm = psc_rerank(backend, task, template, cfg.psc, full)
        return perm, [float(-r) for r in range(1, len(perm.order) + 1)]

    result = full(backend, task, template)
    perm = _permutation_of(result)
    if isinstance(result, CalibratedRanking):
        values = [step.scores[step.chosen] for step in result.trace]
    else:
        # windowed decode has no single trace; fall back to rank-derived scores
        values = [float(-r) for r in range(1, len(perm.order) + 1)]
    return perm, values


def cmd_rerank(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not cfg.tasks:
        raise ConfigError("rerank needs a task file (--tasks or CAPCAL_TASKS)")
    records = load_task_file(cfg.tasks)
    if not records:
        raise ConfigError(f"task file {cfg.tasks} contains no queries")
    template = _load_template(cfg)
    method = args.method

    betas: list[Optional[float]] = [None]
    if args.sweep_beta:
        if method != "capcal":
            raise ConfigError("--sweep-beta only applies to method=capcal")
        try:
            betas = [float(b) for b in args.sweep_beta.split(",") if b.strip()]
        except ValueError as err:
            raise ConfigError(f"bad --sweep-beta value: {err}") from err
        if not betas:
            raise ConfigError("--sweep-beta got an empty list")

    base_tag = args.tag or method
    out_path = Path(cfg.out)
    backend = build_backend(cfg)
    try:
        for beta in betas:
            calibration = cfg.calibration if beta is None else replace(cfg.calibration, beta=beta)
            tag = base_tag if beta is None else f"{base_tag}-beta{beta:g}"
            target = out_path if beta is None else out_path.with_name(
                f"{out_path.stem}.beta{beta:g}{out_path.suffix}"
            )
            run = _rerank_all(backend, records, template, cfg, method, calibration, tag)
            write_run(run, target)
            logger.info("wrote %d entries to %s", len(run.entries), target)
    finally:
        _close_backend(backend)
    return 0


def _rerank_all(
    backend: ScoringBackend,
    records: list[TaskRecord],
    template: PromptTemplate,
    cfg: CliConfig,
    method: str,
    calibration: CalibrationConfig,
    tag: str,
) -> RunFile:
    def process(record: TaskRecord) -> list[RunEntry]:
        task = _task_of(record, cfg)
        if task is None:
            if not record.candidates:
                logger.warning("query %s has no candidates; skipped", record.query_id)
                return []
            doc_id = record.candidates[0][0]
            return [RunEntry(record.query_id, doc_id, 1, 1.0, tag)]
        perm, values = _rank_one(backend, task, template, cfg, method, calibration)
        scores = _strictly_decreasing(values)
        entries = []
        for rank_pos, (idx, score) in enumerate(zip(perm.order, scores), start=1):
            entries.append(
                RunEntry(record.query_id, task.candidates[idx - 1].doc_id, rank_pos, score, tag)
            )
        logger.info("query %s: ranked %d candidates [%s]", record.query_id, len(entries), tag)
        return entries

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            per_query = list(pool.map(process, records))
    else:
        per_query = [process(r) for r in records]

    entries = [entry for block in per_query for entry in block]
    return RunFile(entries)


def _find_record(records: list[TaskRecord], query_id: str) -> TaskRecord:
    for record in records:
        if record.query_id == query_id:
            return record
    raise UnknownQuery(f"query id {query_id!r} not found in task file")


def cmd_prior(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not cfg.tasks:
        raise ConfigError("prior needs a task file (--tasks or CAPCAL_TASKS)")
    record = _find_record(load_task_file(cfg.tasks), args.query_id)
    task = _task_of(record, cfg)
    if task is None:
        raise ConfigError(f"query {args.query_id!r} has fewer than 2 candidates")
    if len(task) > cfg.window.size:
        raise ConfigError("prior inspection only supports tasks that fit one window")
    template = _load_template(cfg)
    backend = build_backend(cfg)
    try:
        ranking = decode_capcal(backend, task, template, cfg.calibration)
    finally:
        _close_backend(backend)

    steps = []
    print(f"content-free slot distribution for query {task.query.id}")
    for t in ranking.trace:
        idxs = sorted(t.remaining)
        uniform = 1.0 / len(idxs)
        assert t.p_prior is not None
        total = sum(t.p_prior[i] for i in idxs)
        norm = {i: (t.p_prior[i] / total if total > 0 else uniform) for i in idxs}
        print(f"step {t.step_index} (uniform = {uniform:.4f})")
        row = {"step": t.step_index, "uniform": uniform, "slots": []}
        for i in idxs:
            label = render_label(task.scheme, i)
            deviation = norm[i] - uniform
            print(f"  [{label:>3}] prior={norm[i]:.4f} deviation={deviation:+.4f}")
            row["slots"].append(
                {"index": i, "label": label, "prior": norm[i], "deviation": deviation}
            )
        steps.append(row)
    print()
    print(json.dumps({"query_id": task.query.id, "steps": steps}))
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not cfg.tasks:
        raise ConfigError("explain needs a task file (--tasks or CAPCAL_TASKS)")
    record = _find_record(load_task_file(cfg.tasks), args.query_id)
    task = _task_of(record, cfg)
    if task is None:
        raise ConfigError(f"query {args.query_id!r} has fewer than 2 candidates")
    if len(task) > cfg.window.size:
        raise ConfigError("explain only supports tasks that fit one window")
    template = _load_template(cfg)
    backend = build_backend(cfg)
    try:
        if args.method == "capcal":
            ranking = decode_capcal(backend, task, template, cfg.calibration)
        else:
            ranking = decode_base(backend, task, template)
    finally:
        _close_backend(backend)
    doc_order = [task.candidates[i - 1].doc_id for i in ranking.permutation.order]
    print(
        json.dumps(
            {
                "query_id": task.query.id,
                "method": args.method,
                "permutation": list(ranking.permutation.order),
                "doc_order": doc_order,
                "steps": trace_to_json(ranking),
            }
        )
    )
    return 0


def _parse_metric(metric: str) -> int:
    name, _, depth = metric.partition("@")
    if name.lower() != "ndcg" or not depth.isdigit() or int(depth) < 1:
        raise ConfigError(f"unsupported metric {metric!r}; expected ndcg@k")
    return int(depth)


def cmd_eval(args: argparse.Namespace) -> int:
    k = _parse_metric(args.metric)
    run = parse_run(args.run)
    qrels = parse_qrels(args.qrels)
    report = ndcg_at_k(run, qrels, k)
    width = max(5, *(len(q) for q in report.per_query)) if report.per_query else 5
    print(f"{'query':<{width}}  {report.metric}")
    for qid in sorted(report.per_query):
        print(f"{qid:<{width}}  {report.per_query[qid]:.4f}")
    print(f"{'mean':<{width}}  {report.mean:.4f}")
    print()
    print(
        json.dumps(
            {
                "metric": report.metric,
                "method": report.method_tag,
                "mean": report.mean,
                "per_query": report.per_query,
            }
        )
    )
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    k = _parse_metric(args.metric)
    qrels = parse_qrels(args.qrels)
    reports = [ndcg_at_k(parse_run(path), qrels, k) for path in args.runs]
    comparison = compare_methods(reports)
    print(comparison.render_text())
    print()
    print(json.dumps(comparison.to_json()))
    return 0


def _add_shared_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--backend", choices=["http", "simulated"], dest="backend")
    parser.add_argument("--endpoint", help="http backend base URL")
    parser.add_argument("--sim-spec", dest="sim_spec", help="simulated backend JSON spec")
    parser.add_argument("--auth-env", dest="auth_env", help="env var holding the bearer token")
    parser.add_argument("--timeout", type=float)
    parser.add_argument("--retries", type=int)
    parser.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    parser.add_argument("--adapter-mode", dest="adapter_mode", choices=["score", "completions"])
    parser.add_argument("--template", help="prompt template override file")
    parser.add_argument("--tasks", help="JSONL task file")
    parser.add_argument("--scheme", choices=[s.value for s in SchemeKind])
    parser.add_argument("--placeholder", choices=[p.value for p in PlaceholderKind])
    parser.add_argument("--placeholder-text", dest="placeholder_text")
    parser.add_argument("--placeholder-seed", dest="placeholder_seed", type=int)
    parser.add_argument("--beta", type=float, help="calibration strength")
    parser.add_argument("--prior-mode", dest="prior_mode", choices=[m.value for m in PriorMode])
    parser.add_argument("--terminator")
    parser.add_argument(
        "--raw-prior",
        dest="raw_prior",
        action="store_const",
        const=True,
        help="subtract the raw prior instead of renormalizing over survivors",
    )
    parser.add_argument("--psc-k", dest="psc_k", type=int)
    parser.add_argument("--psc-seed", dest="psc_seed", type=int)
    parser.add_argument(
        "--psc-aggregation", dest="psc_aggregation", choices=[a.value for a in Aggregation]
    )
    parser.add_argument("--window-size", dest="window_size", type=int)
    parser.add_argument("--window-stride", dest="window_stride", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capcal", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_rerank = sub.add_parser("rerank", help="decode tasks and write a TREC run file")
    _add_shared_flags(p_rerank)
    p_rerank.add_argument("--method", choices=["base", "capcal", "psc"], default="capcal")
    p_rerank.add_argument("--out", help="output run file path")
    p_rerank.add_argument("--tag", help="run tag (defaults to the method name)")
    p_rerank.add_argument(
        "--sweep-beta", dest="sweep_beta",
        help="comma-separated beta values; writes one tagged run per value",
    )
    p_rerank.set_defaults(func=cmd_rerank)

    p_prior = sub.add_parser("prior", help="show the content-free slot distribution")
    _add_shared_flags(p_prior)
    p_prior.add_argument("--query-id", dest="query_id", required=True)
    p_prior.set_defaults(func=cmd_prior)

    p_explain = sub.add_parser("explain", help="dump the decode trace for one query")
    _add_shared_flags(p_explain)
    p_explain.add_argument("--query-id", dest="query_id", required=True)
    p_explain.add_argument("--method", choices=["base", "capcal"], default="capcal")
    p_explain.set_defaults(func=cmd_explain)

    p_eval = sub.add_parser("eval", help="score a run file against qrels")
    p_eval.add_argument("run")
    p_eval.add_argument("qrels")
    p_eval.add_argument("--metric", default="ndcg@10")
    p_eval.set_defaults(func=cmd_eval)

    p_compare = sub.add_parser("compare", help="compare several runs against one qrels")
    p_compare.add_argument("runs", nargs="+")
    p_compare.add_argument("--qrels", required=True)
    p_compare.add_argument("--metric", default="ndcg@10")
    p_compare.set_defaults(func=cmd_compare)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if getattr(args, "verbose", False) else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        logger.error("%s", err)
        return 1
    except BackendError as err:
        logger.error("backend failure: %s", err)
        return 2
    except (EvalError, OSError) as err:
        logger.error("%s", err)
        return 3


if __name__ == "__main__":
    sys.exit(main())
