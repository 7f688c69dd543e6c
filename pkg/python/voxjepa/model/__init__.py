"""Student/teacher encoders, mask-token predictor and the pretraining loop."""

from voxjepa.model.config import EncoderConfig, PredictorConfig, TrainConfig
from voxjepa.model.encoder import Encoder, LatentSequence, encode, encode_grid
from voxjepa.model.predictor import Predictor, predict_targets
from voxjepa.model.train import (
    JepaModel,
    TrainResult,
    build_model,
    ema_update,
    load_model,
    save_model,
    train,
    vjepa_loss,
)

__all__ = [
    "EncoderConfig",
    "PredictorConfig",
    "TrainConfig",
    "Encoder",
    "LatentSequence",
    "encode",
    "encode_grid",
    "Predictor",
    "predict_targets",
    "JepaModel",
    "TrainResult",
    "build_model",
    "ema_update",
    "load_model",
    "save_model",
    "train",
    "vjepa_loss",
]
