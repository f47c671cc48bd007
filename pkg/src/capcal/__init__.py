"""Training-free positional-bias calibration for generative listwise reranking.

Listwise rerankers read the query and every candidate in one prompt and
emit a permutation of identifier labels. Their output distribution mixes
two things: how relevant each document is, and which list slots the model
structurally prefers regardless of content. This package estimates the
second component directly, by scoring the same prompt with every passage
replaced by a placeholder, and subtracts its deviation from uniform out of
the ranking probabilities during constrained greedy decoding, weighted by
the decoder's current entropy.

Ships with an uncalibrated baseline decoder, permutation self-consistency
aggregation, sliding-window orchestration for long lists, an HTTP scoring
adapter plus a deterministic simulated LM, and a TREC-style NDCG
evaluation harness with a CLI on top.
"""

from .backends import (
    BackendError,
    BackendUnavailable,
    ContinuationScore,
    HttpScoringBackend,
    MalformedResponse,
    ScoringBackend,
    ScoringRequest,
    SimulatedLM,
    TokenizationMismatch,
    UnrecognizedPrompt,
)
from .baselines import Aggregation, PscConfig, psc_rerank, shuffle_candidates
from .calibration import (
    CalibratedRanking,
    CalibrationConfig,
    DecodeAborted,
    PriorMode,
    RANK_SEPARATOR,
    TieBreak,
    calibrated_scores,
    decode_base,
    decode_capcal,
    joint_identifier_prob,
    sliding_window_rerank,
    step_entropy,
    trace_to_json,
)
from .domain import (
    Candidate,
    DEFAULT_WINDOW_CAP,
    IdentifierScheme,
    Permutation,
    Query,
    RerankTask,
    SchemeKind,
    StepTrace,
    TokenSeq,
    render_label,
    validate_permutation,
)
from .evaluation import (
    DuplicateJudgment,
    EvalError,
    EvalReport,
    MethodComparison,
    NonContiguousRanks,
    ParseError,
    Qrels,
    QuerySetMismatch,
    RunEntry,
    RunFile,
    TaskRecord,
    compare_methods,
    load_task_file,
    ndcg_at_k,
    parse_qrels,
    parse_run,
    runs_equal,
    write_qrels,
    write_run,
)
from .prompting import (
    DEFAULT_TEMPLATE,
    PlaceholderKind,
    PlaceholderPolicy,
    PromptTemplate,
    TemplateError,
    load_template,
    make_placeholder,
    render_empty_prompt,
    render_main_prompt,
)

__version__ = "0.1.0"
