"""Desk-scale weakly-supervised segmentation with easy-example-mining losses."""

from .mining import MiningMode, mining_loss, ohem_loss, pixel_ce, weighted_ce
from .numerics import NumericError, ParamStore, derive_seed, make_rng
from .segpipeline import EvalReport, TrainConfig, evaluate, poly_lr, sliding_infer, train_seg
from .synthdata import SynthConfig, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "MiningMode",
    "NumericError",
    "ParamStore",
    "SynthConfig",
    "TrainConfig",
    "derive_seed",
    "evaluate",
    "generate_dataset",
    "make_rng",
    "mining_loss",
    "ohem_loss",
    "pixel_ce",
    "poly_lr",
    "sliding_infer",
    "train_seg",
    "weighted_ce",
]
