"""Numerical core: Siamese conv encoder, GCN head, loss, gradients and Adam."""
from .backbone import backbone_forward, conv3x3_forward, maxpool2_forward
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import (ModelConfig, adjacency_for, dropout, forward, gcn_layer, gcn_normalize, init_params,
                    loss_and_gradients, siamese_difference, softmax, weighted_masked_ce)
from .optim import AdamState, adam_step

gradients = loss_and_gradients

__all__ = [
    "AdamState", "Checkpoint", "ModelConfig", "adam_step", "adjacency_for", "backbone_forward",
    "conv3x3_forward", "dropout", "forward", "gcn_layer", "gcn_normalize", "gradients",
    "init_params", "load_checkpoint", "loss_and_gradients", "maxpool2_forward", "save_checkpoint",
    "siamese_difference", "softmax", "weighted_masked_ce",
]
