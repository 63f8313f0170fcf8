"""FragNet writer identification on word images, on a small numpy autodiff engine."""

from .arch import (
    FragmentGrid,
    FragmentSpec,
    downmap,
    estimate_flops,
    flops_breakdown,
    fragment_forward,
    make_grid,
    pyramid_forward,
    word_forward,
    wordimgnet_forward,
)
from .config import NetworkConfig, fragnet, wordimgnet
from .nn import ParameterSet, init_parameters
from .optim import AdamState, TrainPlan, adam_step, lr_at, train, word_loss
from .tensor import Tensor, precision, set_precision

__version__ = "0.1.0"

__all__ = [
    "AdamState", "FragmentGrid", "FragmentSpec", "NetworkConfig", "ParameterSet", "Tensor",
    "TrainPlan", "adam_step", "downmap", "estimate_flops", "flops_breakdown", "fragment_forward",
    "fragnet", "init_parameters", "lr_at", "make_grid", "precision", "pyramid_forward",
    "set_precision", "train", "word_forward", "word_loss", "wordimgnet", "wordimgnet_forward",
]
