"""Supervised training of a small float reference model (the teacher of the quantized network)."""
from __future__ import annotations

from dataclasses import replace
import logging

import torch
from torch import nn

from core.datasets import Dataset
from core.exceptions import EmptyTensor
from core.graph import Graph
from core.kernels import WEIGHTED_KINDS
from training.losses import classification_loss
from training.metrics import RunningAverage, top1_correct
from training.train_utils import OptimizerState, Run, TrainConfig, adam_step, cosine_lr

logger = logging.getLogger(__name__)


def train_float(g: Graph, data: Dataset, cfg: TrainConfig, verbose: bool = False) -> Graph:
    """Train every weight and bias of a copy of `g` with cross-entropy; returns the trained copy."""
    assert data.is_labeled, "Float training needs labels"
    if len(data) == 0:
        raise EmptyTensor("Float training needs at least one image")
    cfg = replace(cfg)
    cfg.set_max_steps(len(data), verbose=verbose)
    out = g.copy()
    trainable = []
    for layer in out.layers_of_kind(*WEIGHTED_KINDS):
        layer.weights = nn.Parameter(layer.weights)
        trainable.append(layer.weights)
        if layer.bias is not None:
            layer.bias = nn.Parameter(layer.bias)
            trainable.append(layer.bias)

    run = Run(cfg, verbose=verbose).setup()
    state = OptimizerState.create(trainable, cfg)
    generator = torch.Generator().manual_seed(cfg.seed)

    step = 0
    try:
        for epoch in range(cfg.epochs):
            epoch_loss, accuracy = RunningAverage(), RunningAverage()
            order = torch.randperm(len(data), generator=generator)
            for start in range(0, len(data), cfg.batch_size):
                if step >= cfg.max_steps:
                    break
                run.reset_step(step, cfg.max_steps)
                idx = order[start:start + cfg.batch_size]
                lr, restart = cosine_lr(step, cfg)
                logits = out.logits(data.images[idx])
                loss = classification_loss(logits, data.labels[idx])
                loss.backward()
                adam_step(state, lr, restart)

                epoch_loss.add(loss.detach())
                accuracy.add(top1_correct(logits.detach(), data.labels[idx]))
                run.log_step(lr, loss, restart)
                step += 1
            run.log_epoch(epoch, epoch_loss.get_average())
            logger.info("Float epoch %d: train accuracy %.4f", epoch + 1, accuracy.get_average())
    finally:
        run.finish()

    for layer in out.layers_of_kind(*WEIGHTED_KINDS):
        layer.weights = layer.weights.detach().clone()
        if layer.bias is not None:
            layer.bias = layer.bias.detach().clone()
    return out
