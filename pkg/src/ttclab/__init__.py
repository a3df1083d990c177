"""Desk-scale laboratory for verifier-based vs verifier-free
test-time-compute scaling on bi-level-reward token MDPs."""

from .mdp import (
    BiLevelReward,
    MdpSpec,
    Policy,
    Prompt,
    Trajectory,
    bilevel_location,
    check_bilevel_property,
    enumerate_trajectories,
    q_value_exact,
    rollout,
    trajectory_reward,
    value_exact,
    value_mc,
)
from .metrics import (
    AntiConcReport,
    DivergenceKind,
    HeterogeneityReport,
    MonteCarlo,
    anti_concentration,
    density_ratio_sup,
    divergence,
    divergence_inequality_check,
    heterogeneity,
    partition_score_L,
)
from .constructions import (
    Codebook,
    complement_reward,
    extend_comparator,
    gilbert_varshamov_codebook,
    make_comparator_policy,
    make_packing_family,
    make_tilted_policy,
    solve_tilt_theta,
    two_branch_instance,
)
from .planted import (
    EXHAUSTED,
    MixtureBasePolicy,
    PlantedEnvSpec,
    ProceduralPolicy,
    make_planted_env,
    mixture_base_policy,
    normalized_return,
    procedural_policy,
    rejection_sample_expert,
)
from .learners import (
    AnnotatedDataset,
    TrainConfig,
    binary_search_annotate,
    pessimistic_ensemble,
    reinforce_train,
    sft_train,
    verifier_error,
    verifier_predict,
    verifier_train,
)
from .certify import oracle_verify

__version__ = "0.1.0"
