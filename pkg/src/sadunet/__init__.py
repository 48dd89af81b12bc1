"""Self-attention Dense-UNet for voice/accompaniment separation, built on a small numpy autograd."""

from .audio import AudioClip, MagPhase, Spectrogram, istft, load_wav, save_wav, split_mag_phase, stft
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .metrics import EvalReport, evaluate_track
from .model import ModelConfig, init_params, parameter_count, predict_masks, unet_forward
from .separate import SeparationResult, separate_track
from .synth import SynthSpec, gen_dataset, gen_pair
from .tensor import ContractError, ShapeError, Tensor
from .train import TrackPair, TrainOptions, train

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "MagPhase", "Spectrogram", "istft", "load_wav", "save_wav", "split_mag_phase", "stft",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "EvalReport", "evaluate_track",
    "ModelConfig", "init_params", "parameter_count", "predict_masks", "unet_forward",
    "SeparationResult", "separate_track",
    "SynthSpec", "gen_dataset", "gen_pair",
    "ContractError", "ShapeError", "Tensor",
    "TrackPair", "TrainOptions", "train",
]
