"""Multi-focus image fusion trained on pixel-shuffled single images.

The package builds everything on NumPy: a small reverse-mode autodiff tape,
selective state space scans, a ResBlock plus Mamba fusion network, the
training-pair synthesizer, fusion quality metrics and a PGM/PPM command line.
"""

from .autodiff import Tensor, no_grad
from .estimator import IPSFusion, PixelShuffler
from .imageio import read_image, write_image
from .metrics import MetricReport, evaluate, psnr, q_abf, q_mi, q_sf, ssim
from .network import FusionNet, ModelConfig, forward, init_model
from .shuffle import ShuffleConfig, synthesize
from .ssm import selective_scan, zoh_discretize
from .trainer import TrainConfig, Trainer, run_training

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "IPSFusion",
    "PixelShuffler",
    "read_image",
    "write_image",
    "MetricReport",
    "evaluate",
    "psnr",
    "ssim",
    "q_mi",
    "q_sf",
    "q_abf",
    "FusionNet",
    "ModelConfig",
    "forward",
    "init_model",
    "ShuffleConfig",
    "synthesize",
    "selective_scan",
    "zoh_discretize",
    "TrainConfig",
    "Trainer",
    "run_training",
]
