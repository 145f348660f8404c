"""Lesion-deficit mapping: a deep latent-substrate model, mass-univariate
baselines, and a semi-synthetic benchmark for comparing them."""

__version__ = "0.1.0"

from . import grids, simulate, massuni, metrics
from .grids import VolumeGrid, load_volume, save_volume

__all__ = ["grids", "simulate", "massuni", "metrics",
           "VolumeGrid", "load_volume", "save_volume", "__version__"]
