"""CNN-LSTM crop-yield regression over multi-spectral raster sequences, built on numpy."""

from .errors import (
    ConfigMismatchError,
    DivergenceError,
    EvaluationError,
    FormatError,
    InputError,
    ShapeError,
    StateError,
)
from .model import (
    ModelConfig,
    ModelParams,
    Sample,
    TrainConfig,
    forward_sequence,
    init_params,
    load_params,
    loss_sequence,
    predict_early,
    predict_full,
    save_params,
    train,
)
from .tensor import SeededRng, gradient_check

__version__ = "0.1.0"
