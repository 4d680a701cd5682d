"""Density-map object counting with scale-aware adversarial domain adaption,
built on a small NumPy reverse-mode autodiff core."""

from .density import AdaptiveSigma, FixedSigma, PointAnnotation, generate_density, load_annotations, save_annotations
from .metrics import evaluate_dataset, gmae, mae, mse
from .nets import CountingNetConfig, DiscriminatorConfig, counting_forward, discriminator_forward, init_params
from .synth import DomainSpec, generate_domain, preset_shift_pair
from .train import Checkpoint, TrainConfig, adapt, evaluate_checkpoint, predict, pretrain

__version__ = "0.1.0"
