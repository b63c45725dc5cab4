"""Minimal reverse-mode autodiff with the 3D layers the toy networks need."""

from dmseg.autograd.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from dmseg.autograd.nn import LayerSpec, Network, NetworkSpec, kaiming_uniform_init, lrnet_spec, mnet_spec
from dmseg.autograd.optim import Adam, PlateauDecay
from dmseg.autograd.tensor import Tensor

__all__ = [
    "Adam", "Checkpoint", "LayerSpec", "Network", "NetworkSpec", "PlateauDecay", "Tensor",
    "kaiming_uniform_init", "load_checkpoint", "lrnet_spec", "mnet_spec", "save_checkpoint",
]
