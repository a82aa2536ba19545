"""Keyed multi-watermark embedding and extraction for factorized radiance fields."""

from .config import DecoderPretrainConfig, TrainConfig
from .decoder import BitDecoder, bit_accuracy, decode_bits, decode_logits, pretrain_decoder
from .messages import MessageRegistry, generate_message_registry
from .model import ModelSpec, SceneModel
from .rendering import Camera, render_image
from .scenes import Scene, load_scene, make_toy_scene
from .training import TrainResult, run_training

__version__ = "0.1.0"

__all__ = [
    "BitDecoder",
    "Camera",
    "DecoderPretrainConfig",
    "MessageRegistry",
    "ModelSpec",
    "Scene",
    "SceneModel",
    "TrainConfig",
    "TrainResult",
    "bit_accuracy",
    "decode_bits",
    "decode_logits",
    "generate_message_registry",
    "load_scene",
    "make_toy_scene",
    "pretrain_decoder",
    "render_image",
    "run_training",
    "__version__",
]
