"""UNREAL agent: A3C CNN-LSTM with pixel control, reward prediction and
value replay, trained on procedurally generated pixel gridworlds."""

from ._accel import USE_NUMBA, backend_name
from .config import RunConfig, load_config, parse_config
from .trainer import Trainer, train

__all__ = ["RunConfig", "Trainer", "USE_NUMBA", "backend_name", "load_config", "parse_config", "train"]
__version__ = "0.1.0"
