"""Tabular Q-learning for closed-loop LED light control, with a chamber simulator."""

from luxloop.core_rl import (
    NUM_STATES,
    PWM_MAX,
    AgentConfig,
    QAgent,
    QTable,
    TargetLevel,
    apply_action,
    decay_epsilon,
    greedy_policy,
    q_update,
    reward_for,
    select_action,
)
from luxloop.energy import EnergyReport, compare_controllers, energy_account
from luxloop.env_sim import (
    DisturbanceEvent,
    EnvModel,
    Environment,
    Scenario,
    discretize,
    inject_disturbance,
    smooth_reading,
    step_env,
    target_band,
)
from luxloop.harness import EpisodeRecord, SweepSummary, TrialConfig, detect_convergence, run_sweep, run_trial
from luxloop.oracle import build_desk_mdp, policy_agreement, value_iteration

__version__ = "0.1.0"
