"""Low-rank adapters initialised by activation boundary matching, on a numpy autodiff core."""
from .abm import AbmConfig, run_stage1
from .autodiff import Graph, Tensor2
from .data import Dataset, ScenarioSpec, build_scenario
from .errors import (AbmLoraError, ConfigError, ConsistencyError, DataError, DimensionError,
                     NumericalError)
from .geometry import decompose, info_loss
from .lora import LoraAdapter, init_adapter, load_adapters, save_adapters
from .models import MLP, TransformerBlock, build_model
from .train import ProbeSchedule, TrainConfig, fine_tune

__version__ = "0.1.0"
