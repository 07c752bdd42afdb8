"""Delayed-hint model collaboration for streaming binaural speech tasks.

A small low-latency model runs locally while a larger model on a second
node streams back time-delayed hint embeddings over a simulated channel.
The package covers the signal processing, the two backbone models, the
hint protocol, a deterministic tick-level runtime with causality audits,
a synthetic corpus generator, and joint training.
"""

from .boost import BoostedSmallModel, BoostedStream, JointModel
from .config import CorpusConfig, SessionConfig
from .dsp import AudioSignal, Spectrogram, istft, mean_si_sdr, si_sdr, stft
from .errors import (
    CausalityViolation,
    ConfigError,
    HintstreamError,
    NumericFaultError,
    ProtocolFault,
)
from .gridnet import GridConfig, GridNet, config_for, param_count
from .runtime import DelayConfig, causality_audit, hint_throughput, run_session
from .synth import build_corpus, load_manifest, make_mixture, plan_corpus
from .train import TrainConfig, pretrain_baseline, pretrain_large, train_kb

__version__ = "0.1.0"

__all__ = [
    "AudioSignal",
    "BoostedSmallModel",
    "BoostedStream",
    "CausalityViolation",
    "ConfigError",
    "CorpusConfig",
    "DelayConfig",
    "GridConfig",
    "GridNet",
    "HintstreamError",
    "JointModel",
    "NumericFaultError",
    "ProtocolFault",
    "SessionConfig",
    "Spectrogram",
    "TrainConfig",
    "build_corpus",
    "causality_audit",
    "config_for",
    "hint_throughput",
    "istft",
    "load_manifest",
    "make_mixture",
    "mean_si_sdr",
    "param_count",
    "plan_corpus",
    "pretrain_baseline",
    "pretrain_large",
    "run_session",
    "si_sdr",
    "stft",
    "train_kb",
]
