"""Roster-of-Experts inference for toy mixture-of-experts transformers."""

__version__ = "0.1.0"
FORMAT_VERSIONS = {"checkpoint": "MOECKPT1/1", "bench": "roster.bench/1", "generation": "roster.generation/1"}

from roster.cache import CacheMode, DecodeCache  # noqa: E402
from roster.engine import GenerationResult, RoEConfig, aggregate, generate, greedy_decode, perplexity, roe_step  # noqa: E402
from roster.model import ModelConfig, MoEModel, forward_deterministic, init_model, load_checkpoint, save_checkpoint  # noqa: E402
from roster.routing import RngStreamKey, RoutingDecision, TemperatureProfile, gumbel_noise, route  # noqa: E402
from roster.tuner import SearchSpace, TrialRecord, tpe_suggest, tune  # noqa: E402

__all__ = [
    "CacheMode", "DecodeCache", "GenerationResult", "RoEConfig", "aggregate", "generate", "greedy_decode",
    "perplexity", "roe_step", "ModelConfig", "MoEModel", "forward_deterministic", "init_model",
    "load_checkpoint", "save_checkpoint", "RngStreamKey", "RoutingDecision", "TemperatureProfile",
    "gumbel_noise", "route", "SearchSpace", "TrialRecord", "tpe_suggest", "tune",
]
