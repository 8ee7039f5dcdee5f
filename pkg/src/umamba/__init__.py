"""U-shaped multi-scale selective-SSM forecaster for long-horizon time series."""

from .autodiff import Tensor, backward, grad_check
from .data import Dataset, Metrics, load_csv, mae, mse, split, windows
from .errors import ConfigError, DataError, DivergenceError, UmambaError
from .mamba import MambaBlockConfig, init_mamba, mamba_forward
from .model import ModelConfig, forecast, init_model, load_checkpoint, save_checkpoint
from .rng import set_seed
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
