"""Link adaptation and device scheduling for short-packet TDMA downlinks."""

from .config import ExperimentConfig
from .env import EpisodeMetrics, SchedulingViolation, TdmaEnv
from .experiment import build_env, evaluate, make_policy, train
from .gexp_bo import GexpBo, GexpState
from .gp import GaussianProcessSurrogate, SurrogateDataset
from .phy import CqiCodec, FblParams, McsTable, bler, ideal_rate
from .policies import (BoCmabPolicy, DqnPolicy, IdealPolicy, OllaCmabPolicy, Policy,
                       Td3Policy)
from .td3 import Td3Agent

__all__ = [
    "BoCmabPolicy", "CqiCodec", "DqnPolicy", "EpisodeMetrics", "ExperimentConfig",
    "FblParams", "GaussianProcessSurrogate", "GexpBo", "GexpState", "IdealPolicy",
    "McsTable", "OllaCmabPolicy", "Policy", "SchedulingViolation", "SurrogateDataset",
    "Td3Agent", "Td3Policy", "TdmaEnv", "bler", "build_env", "evaluate", "ideal_rate",
    "make_policy", "train",
]
__version__ = "0.1.0"
