"""cotdecode: a decoding engine that branches over the top-k first-step
tokens, continues greedily, and selects or aggregates paths by the model's
answer-confidence margin, alongside greedy/sampling/beam baselines, synthetic
reasoning tasks with programmatic ground truth, and an evaluation harness."""

from .backends import (
    BackendError,
    InvalidSpec,
    ModelBackend,
    NextTokenDistribution,
    RemoteBackend,
    TableModel,
    TableModelSpec,
    TokenEntry,
    TransportError,
    build_table_model,
    load_table_spec,
)
from .decoding import (
    DecodedPath,
    DecodeStrategy,
    StepRecord,
    beam_search_decode,
    branch_topk_decode,
    derive_seed,
    greedy_decode,
    sample_decode,
)
from .extraction import (
    AnswerSpan,
    AnswerSpec,
    align_continuation,
    canonical_number,
    extract_answer,
    is_ill_formed,
    parse_number,
)
from .harness import (
    ExperimentConfig,
    Report,
    ReportRow,
    emit_report,
    load_config,
    replay_run,
    run_experiment,
)
from .scoring import (
    AggregateResult,
    ScoredPath,
    aggregate_weighted,
    answer_confidence,
    majority_vote,
    rank_by_logprob,
    score_paths,
    select_max_confidence,
)
from .tasks import (
    PromptTemplate,
    TaskInstance,
    build_prompt,
    evaluate_arithmetic,
    gen_coin_flip,
    gen_multistep_arithmetic,
    gen_web_of_lies,
    gen_year_parity,
    grade_prediction,
    load_jsonl_dataset,
)

__version__ = "0.1.0"
