"""Gaussian process regression with stationary and non-stationary spectral
mixture kernels, sparse variational inference, and a training CLI."""

__version__ = "0.1.0"

from .autodiff import Param, Tape, backward, check_gradients  # noqa: F401
from .data import Dataset, SyntheticSpec, load_csv, prepare, synthesize  # noqa: F401
from .kernels import GSMKernel, RBFKernel, SMKernel, spectrogram  # noqa: F401
from .latent import ConstantFunction, GPInterpFunction, NeuralFunction  # noqa: F401
from .svgp import SVGPModel, metrics  # noqa: F401
from .training import TrainConfig, build_model, grid_search, train  # noqa: F401
