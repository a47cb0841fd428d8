from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ModelConfig, desk_config, full_config, toy_config
from .network import ForwardOutput, SpeakerEmbedding, ablate_cross_attention, extract, forward
from .params import ModelParameters, init_params, param_count, param_ledger, parameter_shapes, randomize

__all__ = [
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "ModelConfig", "desk_config", "full_config", "toy_config",
    "ForwardOutput", "SpeakerEmbedding", "ablate_cross_attention", "extract", "forward",
    "ModelParameters", "init_params", "param_count", "param_ledger", "parameter_shapes", "randomize",
]
