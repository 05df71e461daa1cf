"""Sequential recommendation with an enhanced Markov-chain predictor and an MDP policy."""

__version__ = "0.1.0"

from .domain import MISSING, DataError, ItemCatalog, advance, state_from_history, unorder
from .ingestion import SessionSet, filter_sequences, load_events, sessionize, split
from .mc_model import MixtureModel, build, predict, rank
from .mdp import MdpModel, Policy, explore, mdp_transition_row, observe, recommend, solve
from .eval import evaluate, expand_cases, exponential_decay_score, recommendation_score
from .kernels import BACKEND

__all__ = [
    "BACKEND",
    "DataError",
    "ItemCatalog",
    "MISSING",
    "MdpModel",
    "MixtureModel",
    "Policy",
    "SessionSet",
    "advance",
    "build",
    "evaluate",
    "expand_cases",
    "explore",
    "exponential_decay_score",
    "filter_sequences",
    "load_events",
    "mdp_transition_row",
    "observe",
    "predict",
    "rank",
    "recommend",
    "recommendation_score",
    "sessionize",
    "solve",
    "split",
    "state_from_history",
    "unorder",
]
