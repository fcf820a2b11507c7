"""Fine-tuning of quantization parameters by distillation from the float model on unlabeled data."""
from __future__ import annotations

from dataclasses import replace
import logging

import torch

from core.datasets import Dataset
from core.exceptions import EmptyTensor
from core.graph import Graph
from core.kernels import WEIGHTED_KINDS
from core.utils import num_parameters
from quant.quantizer import QuantParams
from quant.simulate import FakeQuantNetwork, PointwiseScales
from training.losses import distillation_loss
from training.metrics import RunningAverage
from training.train_utils import OptimizerState, Run, TrainConfig, TrainingLog, adam_step, cosine_lr

logger = logging.getLogger(__name__)


def _freeze_graph(g: Graph):
    for layer in g.layers_of_kind(*WEIGHTED_KINDS):
        for t in (layer.weights, layer.bias):
            if t is not None:
                t.requires_grad_(False)


def finetune(
    g_float: Graph,
    params: dict[str, QuantParams],
    scales: PointwiseScales | None,
    data: Dataset | torch.Tensor,
    cfg: TrainConfig,
    verbose: bool = False,
) -> tuple[dict[str, QuantParams], PointwiseScales | None, TrainingLog]:
    """Train the enabled groups (threshold scales and/or pointwise scales) of the fake-quant student so
    its logits match the float teacher's. The float graph is never modified.

    Returns the updated params (trainables post-clip), the scales and the training log.
    """
    images = data.images if isinstance(data, Dataset) else data
    if len(images) == 0:
        raise EmptyTensor("Fine-tuning needs at least one image")
    cfg = replace(cfg)
    cfg.set_max_steps(len(images), verbose=verbose)
    _freeze_graph(g_float)
    if cfg.train_pointwise and scales is None:
        scales = PointwiseScales.for_graph(g_float)

    student = FakeQuantNetwork(g_float, params, scales)
    for p in student.threshold_parameters():
        p.requires_grad_(cfg.train_thresholds)
    for p in student.scale_parameters():
        p.requires_grad_(cfg.train_pointwise)

    trainable = [p for p in student.parameters() if p.requires_grad]
    run = Run(cfg, verbose=verbose).setup()
    run.print(f"Number of trainable parameters: {num_parameters(trainable):,}")
    state = OptimizerState.create(trainable, cfg) if trainable else None

    generator = torch.Generator().manual_seed(cfg.seed)
    step = 0
    epoch = 0
    try:
        while step < cfg.max_steps:
            epoch_loss = RunningAverage()
            order = torch.randperm(len(images), generator=generator)
            for start in range(0, len(images), cfg.batch_size):
                if step >= cfg.max_steps:
                    break
                run.reset_step(step, cfg.max_steps)
                batch = images[order[start:start + cfg.batch_size]]
                lr, restart = cosine_lr(step, cfg)

                with torch.no_grad():
                    z_teacher = g_float.logits(batch)
                loss = distillation_loss(z_teacher, student(batch))
                if state is not None:
                    loss.backward()
                    adam_step(state, lr, restart)

                epoch_loss.add(loss.detach())
                run.log_step(lr, loss, restart)
                step += 1
            run.log_epoch(epoch, epoch_loss.get_average())
            epoch += 1
    finally:
        log = run.finish()
    logger.info(
        "Fine-tuned %s for %d steps (%d restarts), final epoch loss %s",
        cfg.train, step, state.restarts if state else 0, log.epoch_losses[-1] if log.epoch_losses else None,
    )
    if scales is not None:
        for p in scales.parameters():
            p.requires_grad_(False)
    return student.current_params(), scales, log
