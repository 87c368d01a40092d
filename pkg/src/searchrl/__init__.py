"""Adaptive search-depth rewards and training for retrieval agents.

The package measures where the minimal sufficient search depth lies for
a question/agent pair, rewards reaching it while penalizing over- and
under-searching, and verifies at desk scale that those rewards drive a
trainable policy to the right depth.
"""

__version__ = "0.1.0"

from .env import EpisodeConfig, format_observation, probe_fixed_depth, run_dataset, run_episode
from .errors import (
    ProtocolError,
    SchemaError,
    SearchRLError,
    TrainingDiverged,
    TransportError,
    UsageError,
)
from .metrics import MetricsReport, aggregate_metrics, exact_match, normalize_answer, token_f1
from .policy import (
    ParametricTextPolicy,
    PromptTemplate,
    RemotePolicy,
    ScriptedCapability,
    ScriptedPolicy,
    builtin_template,
    intermediate_answer,
    render_prompt,
    serialize_prefix,
)
from .retrieval import (
    Document,
    OracleRetriever,
    RetrievalIndex,
    ingest_corpus,
    load_corpus,
    oracle_retrieve,
    write_corpus,
)
from .rewards import (
    DEFAULT_CONSTANTS,
    RewardBreakdown,
    RewardConstants,
    classify_steps,
    cumulative_reward_curve,
    efficiency_reward,
    find_capability_depth,
    format_reward,
    outcome_reward,
    quality_reward,
    score_trajectory,
)
from .tasks import SyntheticTask, corpus_documents, generate_tasks, load_tasks, write_task_files
from .training import (
    EnvSpec,
    ParametricPolicy,
    TrainerConfig,
    TrainingLog,
    gae_advantages,
    learning_rate_at,
    masked_ppo_loss,
    train,
)
from .trajectory import (
    AgentAction,
    ParsedText,
    QuestionRecord,
    Step,
    StepRewards,
    Termination,
    Trajectory,
    actions_to_text,
    check_step_validity,
    load_trajectory,
    parse_tagged_text,
    read_dataset,
    read_trajectories,
    serialize_trajectory,
    write_dataset,
    write_trajectories,
)
