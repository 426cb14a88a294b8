"""Latent-space augmentation for weakly supervised slide classification, at desk scale."""
from .generator import GeneratorConfig, GeneratorModel, TrainConfig, augment_batch, init_generator, train_generator
from .patchlab import TransformSequence, TransformStep, apply_sequence, sample_sequence, synth_patch
from .toyencoder import ToyEncoder, init_encoder

__all__ = [
    "GeneratorConfig", "GeneratorModel", "TrainConfig", "augment_batch", "init_generator", "train_generator",
    "TransformSequence", "TransformStep", "apply_sequence", "sample_sequence", "synth_patch",
    "ToyEncoder", "init_encoder",
]
__version__ = "0.1.0"
