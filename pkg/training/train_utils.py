from dataclasses import asdict, dataclass, field
import json
import math
import os
from pathlib import Path
import pprint
import time
from typing import Iterable, Literal

import torch

from core.exceptions import NonFiniteGradient
from core.utils import CustomEncoder


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 8
    lr: float = 1e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    period: int = None  # cosine period in steps; None means one epoch
    seed: int = 0
    train: Literal["thresholds", "pointwise", "both", "none"] = "thresholds"
    max_steps: int = None  # None means derived from epochs

    log_interval: int = 1
    use_wandb: bool = False
    run_path: Path = None  # where the JSON-lines log is written; None keeps it in memory only
    run_name: str = "finetune"
    config_hash: str = None  # stamped on every line of train_log.jsonl when set

    def __post_init__(self):
        assert self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"
        assert 0 < self.beta1 < 1 and 0 < self.beta2 < 1, f"Adam betas must be in (0, 1), got {self.beta1}, {self.beta2}"
        assert self.period is None or self.period >= 1, f"period must be >= 1, got {self.period}"
        assert self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"
        assert self.train in ("thresholds", "pointwise", "both", "none"), f"Unknown train group {self.train}"
        if self.run_path is not None:
            self.run_path = Path(self.run_path)

    @property
    def train_thresholds(self) -> bool:
        return self.train in ("thresholds", "both")

    @property
    def train_pointwise(self) -> bool:
        return self.train in ("pointwise", "both")

    def steps_per_epoch(self, len_dataset: int) -> int:
        return math.ceil(len_dataset / self.batch_size)

    def set_max_steps(self, len_dataset: int, verbose: bool = False):
        steps_per_epoch = self.steps_per_epoch(len_dataset)
        if self.period is None:
            self.period = max(1, steps_per_epoch)
        if self.max_steps is not None:
            if verbose:
                print("Warning: epochs is ignored when max_steps is set", flush=True)
            return
        self.max_steps = self.epochs * steps_per_epoch
        if verbose:
            print(f"Training for {self.epochs} epochs, {self.max_steps} steps", flush=True)

    def to_dict(self):
        return asdict(self)


def cosine_lr(step: int, cfg: TrainConfig) -> tuple[float, bool]:
    """Cosine-annealed learning rate with warm restarts every `cfg.period` steps.

    Returns (lr, restart); restart is set at every multiple of the period, where the optimizer
    moments are cleared.
    """
    assert step >= 0, f"step must be >= 0, got {step}"
    assert cfg.period is not None, "period is not set, call set_max_steps first"
    t = step % cfg.period
    lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * t / cfg.period))
    return lr, t == 0


@dataclass
class OptimizerState:
    optimizer: torch.optim.Adam
    step: int = 0
    restarts: int = 0

    @classmethod
    def create(cls, param_groups: Iterable, cfg: TrainConfig) -> "OptimizerState":
        optimizer = torch.optim.Adam(param_groups, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
        return cls(optimizer)

    @property
    def parameters(self) -> list[torch.Tensor]:
        return [p for group in self.optimizer.param_groups for p in group["params"]]

    def reset(self):
        "Clear first/second moments and Adam's bias-correction step; parameters are kept."
        self.optimizer.state.clear()
        self.restarts += 1


def adam_step(state: OptimizerState, lr: float, restart: bool = False) -> OptimizerState:
    """One Adam update from the gradients accumulated in the parameters' `.grad`."""
    if restart and state.step > 0:
        state.reset()

    for param_group in state.optimizer.param_groups:
        param_group["lr"] = lr

    for p in state.parameters:
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteGradient(f"Non-finite gradient at step {state.step} for a parameter of shape {tuple(p.shape)}")

    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return state


@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)  # {step, lr, loss, restart}
    epoch_losses: list[float] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


class Run:
    def __init__(self, cfg: TrainConfig, verbose: bool = True):
        self.cfg = cfg
        self.verbose = verbose
        self.log = TrainingLog()
        self.log_to_wandb = False
        self._log_file = None

        self.step = None
        self.max_steps = None
        self.step_t0 = None

    @property
    def run_path(self) -> Path:
        return self.cfg.run_path

    def setup(self):
        if self.run_path is not None:
            os.makedirs(self.run_path, exist_ok=True)
            self._log_file = open(self.run_path / "train_log.jsonl", "w", encoding="utf-8")
        self.setup_wandb()
        self.print("run_name:", self.cfg.run_name)
        self.print("Training config:")
        self.pprint(self.cfg)
        return self

    def print(self, *args, **kwargs):
        kwargs["flush"] = True
        if self.verbose:
            print(*args, **kwargs)

    def pprint(self, *args, **kwargs):
        if self.verbose:
            pprint.pprint(*args, **kwargs)

    def setup_wandb(self):
        if self.cfg.use_wandb:
            import wandb

            wandb.init(project="fat-quant", name=self.cfg.run_name, config=self.cfg.to_dict())
            self.log_to_wandb = True

    def reset_step(self, step: int, max_steps: int):
        self.step = step
        self.max_steps = max_steps
        self.step_t0 = time.perf_counter()

    @property
    def is_logging_step(self):
        return self.step % self.cfg.log_interval == 0

    def log_step(self, lr: float, loss: torch.Tensor | float, restart: bool):
        if isinstance(loss, torch.Tensor):
            loss = loss.item()
        record = {"step": self.step, "lr": lr, "loss": loss, "restart": restart}
        self.log.steps.append(record)
        if self._log_file is not None:
            line = record if self.cfg.config_hash is None else {**record, "config_hash": self.cfg.config_hash}
            self._log_file.write(json.dumps(line, cls=CustomEncoder, sort_keys=True) + "\n")

        if not self.is_logging_step:
            return
        t1 = time.perf_counter()
        self.print(
            f"Step {self.step + 1}/{self.max_steps}: "
            f"loss {loss:.8f}, lr {lr:.3g}{' (restart)' if restart else ''}, "
            f"iter time: {(t1 - self.step_t0) * 1000:.2f}ms"
        )
        if self.log_to_wandb:
            import wandb

            wandb.log({"loss": loss, "lr": lr, "step_time": (t1 - self.step_t0) * 1000}, self.step)

    def log_epoch(self, epoch: int, mean_loss: float):
        self.log.epoch_losses.append(mean_loss)
        self.print(f"Epoch {epoch + 1}: mean loss {mean_loss:.8f}")
        if self.log_to_wandb:
            import wandb

            wandb.log({"epoch_loss": mean_loss, "epoch": epoch + 1}, self.step)

    def finish(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
        if self.log_to_wandb:
            import wandb

            wandb.finish()
        return self.log
