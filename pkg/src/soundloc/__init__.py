"""Sound-aware visual localization on a synthetic desk-scale task.

Everything here is self-contained: a small reverse-mode autodiff engine
on numpy, toy image/audio/text encoders, learned audio-conditioned
prompts, a conditional mask decoder, contrastive training, a synthetic
scene generator, and the metrics + run harness that tie them together.
"""

from .autodiff import ContractViolation, Tensor
from .encoders import EncoderConfig
from .harness import RunConfig, ablate, evaluate, train
from .losses import LossWeights
from .metrics import EvalSample, MetricsReport, compute_report
from .model import SoundLocalizer
from .prompting import PromptConfig
from .synth import GeneratorConfig, SceneSample, generate_scene, make_batch

__version__ = "0.1.0"

__all__ = [
    "ContractViolation", "Tensor", "EncoderConfig", "PromptConfig",
    "LossWeights", "GeneratorConfig", "RunConfig", "SoundLocalizer",
    "SceneSample", "EvalSample", "MetricsReport", "compute_report",
    "generate_scene", "make_batch", "train", "evaluate", "ablate",
    "__version__",
]
