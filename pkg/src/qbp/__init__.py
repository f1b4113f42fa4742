"""Multiplication-light training of fully connected networks.

Forward passes use stochastically binarized or ternarized weights, so every
product is a sign change; backward passes quantize layer inputs to signed
powers of two, so weight updates are bit shifts.
"""

from .instrument import MultCounter, count_step
from .layers import BackwardMode, ForwardMode
from .network import Network, load_checkpoint, save_checkpoint
from .quantize import Pow2Value, ShiftBudget, binarize, clip, pow2_quantize, shift_mul, ternarize
from .tensor import Prng, matmul, sign_accumulate_matmul
from .train import RunConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BackwardMode",
    "ForwardMode",
    "MultCounter",
    "Network",
    "Pow2Value",
    "Prng",
    "RunConfig",
    "ShiftBudget",
    "binarize",
    "clip",
    "count_step",
    "evaluate",
    "load_checkpoint",
    "matmul",
    "pow2_quantize",
    "save_checkpoint",
    "shift_mul",
    "sign_accumulate_matmul",
    "ternarize",
    "train",
]
