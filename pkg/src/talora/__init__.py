"""Tucker-structured multi-task low-rank adaptation in NumPy."""

from .adapter import (
    AdaptedLinear,
    AdapterSpec,
    LoraPair,
    LoraPerTask,
    LoraShared,
    TuckerFactors,
    adapted_forward,
    init_factors,
    init_lora,
    merge,
    param_count,
    reconstruct,
    task_slice,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config
from .estimator import TaskAwareLoRARegressor
from .grad import AdamState, adam_step, backward_tucker, finite_diff_check, lr_at
from .linear import LinearTaskModel
from .msam import EncoderConfig, ToyModel, build_model
from .objective import (
    MetricsTable,
    TaskSpec,
    delta_metric,
    orthogonality_penalty,
    task_loss,
    total_loss,
)
from .synth import SynthTaskData, noise_floor, synth_dataset
from .tensor import fold, kronecker, mode_n_product, tucker_oracle, unfold
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
