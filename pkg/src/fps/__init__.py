"""First-glance policy selection for tabular offline RL.

Given an offline dataset logged under a known behavioral policy, the library
partitions participants by their initial states, estimates each candidate
policy's gain over the behavioral policy per subgroup (optionally after
augmenting small subgroups with a learned trajectory model), and assigns each
new arrival the best policy of its subgroup using the initial state alone.
A simulated sepsis-treatment environment and a suite of standard off-policy
estimators provide an end-to-end benchmark.
"""

__version__ = "0.1.0"

from .mdp import (
    N_ACTIONS,
    N_STATES,
    OfflineDataset,
    SepsisState,
    Trajectory,
    TreatmentAction,
    decode_action,
    decode_state,
    discounted_return,
    encode_action,
    encode_state,
    load_dataset,
    save_dataset,
)
from .ope import (
    CoverageError,
    DegenerateSupportError,
    EstimateReport,
    effective_sample_size,
    fqe,
    fqe_estimate,
    gain_estimate,
    gain_variance_bound,
    importance_weights,
    magic_estimate,
    pdis_estimate,
    rrs,
    wdr_estimate,
    wis_estimate,
)
from .planning import (
    TabularPolicy,
    ValueFunctions,
    behavior_mixture,
    load_policy,
    make_wa,
    make_woa,
    policy_evaluation,
    policy_iteration,
    save_policy,
    sepsis_policy_suite,
    soften,
    state_values,
    true_value,
)
from .selection import (
    FPSConfig,
    SelectionTable,
    fps_deploy,
    fps_nota,
    fps_p,
    fps_train,
)
from .sepsis import PatientContext, SepsisDynamicsConfig, SepsisSim, is_dead, is_discharged, is_terminal
from .seqvae import SeqVAEModel, TrainConfig, elbo, grad_check, sample_trajectories, train
from .subgroup import (
    Partition,
    assign_arrival,
    encode_features,
    fit_partition,
    partition_objective,
    select_m,
    silhouette_score,
)
from .bench import BenchConfig, metric_ae, metric_mae, metric_regret1, run_benchmark
