"""Change detection via iterative feature-difference refinement."""

from .attention import DifferenceEnhancer, IdetConfig
from .backbone import BasicChangeDetector, UNetBackbone, UNetConfig
from .data import ImagePair, SynthConfig, generate_synthetic, load_dataset
from .degrade import DegradeConfig, alpha_sweep, inject_noise, region_means
from .losses import cross_entropy_map, focal_loss_map, total_loss
from .metrics import ConfusionCounts, MetricReport, binarize, confusion, metrics_from_confusion
from .model import ChangeMaps, MsIdetConfig, MultiScaleChangeDetector
from .optim import Adam
from .tensor import Parameter, Tensor, grad_check, no_grad
from .train import TrainConfig, evaluate, load_model, save_model, train_loop

__version__ = "0.1.0"
