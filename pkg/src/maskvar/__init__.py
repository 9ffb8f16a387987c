"""Masked-LM pretraining with a learned mask proposal, and the tools to audit its gradient variance.

Subpackages are plain modules:

``autodiff``      reverse-mode differentiation on numpy arrays
``encoder``       toy transformer encoder with an MLM head
``mapnet``        the half-width proposal network and its REINFORCE objective
``masking``       uniform / proposal masking, 80/10/10 corruption, exploration
``variance_lab``  exact and Monte Carlo gradient-variance accounting
``trainer``       joint optimisation, metrics, checkpoints
``corpus``        synthetic grammar, vocabulary, text IO, batching
``cli``           the ``maskvar`` command
"""

from .corpus import SyntheticGrammar, TokenSequence, Vocabulary, generate_corpus, load_corpus, save_corpus
from .encoder import EncoderConfig, EncoderParams
from .mapnet import MapNetConfig, MapNetParams, MaskPlan, ProposalDistribution
from .trainer import StepMetrics, TrainConfig, TrainState, train
from .variance_lab import VarianceReport

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "EncoderParams",
    "MapNetConfig",
    "MapNetParams",
    "MaskPlan",
    "ProposalDistribution",
    "StepMetrics",
    "SyntheticGrammar",
    "TokenSequence",
    "TrainConfig",
    "TrainState",
    "VarianceReport",
    "Vocabulary",
    "generate_corpus",
    "load_corpus",
    "save_corpus",
    "train",
]
