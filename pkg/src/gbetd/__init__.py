"""Off-policy TD with history-dependent lambda and generalized Bellman operators."""
from .errors import ConditionError, ConfigError, StructureError
from .mdp import (FeatureMap, TabularMdp, behavior_stationary_dist, importance_ratio,
                  load_mdp, save_mdp, validate, value_function)
from .schemes import (CompositeScheme, LambdaScheme, check_condition3, constant_lambda,
                      custom_scheme, retrace_scheme, scaling_scheme,
                      truncated_retrace_scheme)
from .traces import TraceRun, coupling_experiment, run_traces, trace_statistics
from .lstd import LstdAccumulator, solution_metrics, solve
from .environments import build_toy, build_two_state

__version__ = "0.1.0"
