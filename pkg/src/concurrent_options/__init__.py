"""Concurrent options: multi-option models, planning and learning over factored MDPs."""
from .concurrent import (
    CoherencePartition,
    MultiOption,
    build_partition,
    enumerate_multi_options,
    multi_option_model,
    read_model_dump,
    write_model_dump,
)
from .core_mdp import FlatMdp, StateSpace, StateVariable, compose, enumerate_states, project, validate_mdp
from .executor import RngStream, monte_carlo_model, run_multi_option, verify_multi_option
from .learning import LearnerConfig, run_training, running_median, select_epsilon_greedy, smdp_q_update
from .options import MarkovOption, TruncationWarning, option_discounted_model
from .planning import SmdpTask, build_models, evaluate_policy, greedy_policy, svi
from .rooms import build_rooms_domain

__version__ = "0.1.0"
