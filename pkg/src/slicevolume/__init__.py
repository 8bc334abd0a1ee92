"""Conditioned 3D n-phase microstructure synthesis from 2D slices.

The generator is a 3D transpose-convolutional network with adaptive instance
normalisation after every hidden layer; a small MLP maps a code vector
``alpha * 1`` to the per-layer style parameters, so one model covers several
grain-size distributions and can be steered between them.
"""
from .adain import CodeGenerator, adain, adain_layer_apply, make_code
from .metrics import grain_stats, mean_chord_length, two_point_correlation, volume_fractions
from .networks import Critic, CriticConfig, Generator, GeneratorConfig
from .synthetic import GrainSpec, generate_grain_volume, make_dataset
from .training import Dataset, TrainConfig, train
from .volume import LabelVolume, PhaseVolume, load_volume, save_volume

__version__ = "0.1.0"
