"""Staged pipeline: transform -> calibrate -> finetune -> compile -> eval.

Each stage reads the artifacts of the previous ones from `out_dir` and writes its own, tagged with
the hash of the configuration that produced them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
import logging
from pathlib import Path
from typing import Literal
import warnings

import torch

from core import ARTIFACT_PATH
from core.datasets import Dataset, load_dataset, select_calibration, select_subset
from core.exceptions import FlagConflict, MissingPrerequisite
from core.graph import Graph
from core.kernels import LayerKind, WEIGHTED_KINDS
from core.model_io import load_model, save_model
from core.utils import config_hash, read_json, write_json
from engine.fatq import load_fatq, save_fatq
from engine.int8 import compile as compile_model
from engine.int8 import run_int8
from quant.calibration import QuantConfig, build_params, calibrate, params_from_dict, params_to_dict
from quant.simulate import FakeQuantNetwork, PointwiseScales
from quant.transforms import dws_rescale, fold_batch_norm
from training.finetune import finetune
from training.metrics import Aggregator, top1_correct
from training.train_utils import TrainConfig

logger = logging.getLogger(__name__)

EVAL_PATHS = ("float", "fakequant", "int8")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass
class PipelineConfig:
    model: Path  # float model manifest
    data: Path  # training images (IDX); the calibration and fine-tuning sets are drawn from it
    out_dir: Path = ARTIFACT_PATH / "pipeline"
    eval_images: Path = None
    eval_labels: Path = None

    mode: Literal["sym", "asym"] = "sym"
    granularity: Literal["scalar", "vector"] = "scalar"
    dws_granularity: Literal["scalar", "vector"] = "vector"
    bits: int = 8
    fold_bn: bool = True
    dws_rescale: bool = False

    train: Literal["thresholds", "pointwise", "both", "none"] = "thresholds"
    epochs: int = 8
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    calib_size: int = 100
    train_fraction: float = 0.1
    use_wandb: bool = False

    def __post_init__(self):
        for name in ("model", "data", "out_dir", "eval_images", "eval_labels"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, Path(value))
        self.validate()

    def validate(self):
        if self.mode not in ("sym", "asym"):
            raise FlagConflict(f"mode must be sym or asym, got {self.mode}")
        if self.granularity not in ("scalar", "vector") or self.dws_granularity not in ("scalar", "vector"):
            raise FlagConflict(f"granularity must be scalar or vector, got {self.granularity}/{self.dws_granularity}")
        if not 2 <= self.bits <= 16:
            raise FlagConflict(f"bits must be in [2, 16], got {self.bits}")
        if self.calib_size < 1:
            raise FlagConflict(f"calib_size must be positive, got {self.calib_size}")
        if not 0 < self.train_fraction <= 1:
            raise FlagConflict(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.train not in ("thresholds", "pointwise", "both", "none"):
            raise FlagConflict(f"Unknown train group {self.train}")
        if self.epochs < 1 or self.batch < 1:
            raise FlagConflict(f"epochs and batch must be positive, got {self.epochs}, {self.batch}")
        if self.eval_labels is not None and self.eval_images is None:
            raise FlagConflict("eval_labels given without eval_images")

    def to_dict(self) -> dict:
        return {k: str(v) if isinstance(v, Path) else v for k, v in asdict(self).items()}

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict(), exclude=("out_dir", "use_wandb"))

    def quant_config(self) -> QuantConfig:
        return QuantConfig(bits=self.bits, mode=self.mode, granularity=self.granularity, dws_granularity=self.dws_granularity)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch,
            epochs=self.epochs,
            lr=self.lr,
            seed=self.seed,
            train=self.train,
            use_wandb=self.use_wandb,
            run_path=self.out_dir / "finetune",
            config_hash=self.hash,
        )


class QuantPipeline:
    """Quantize a float CNN: fold/rescale, calibrate, fine-tune, compile to int8 and evaluate.

    Stages write their artifacts to out_dir and must run in order; `run` executes all of them.
    """

    def __init__(
        self,
        model: Path,
        data: Path,
        out_dir: Path = ARTIFACT_PATH / "pipeline",
        eval_images: Path = None,
        eval_labels: Path = None,
        mode: Literal["sym", "asym"] = "sym",
        granularity: Literal["scalar", "vector"] = "scalar",
        dws_granularity: Literal["scalar", "vector"] = "vector",
        bits: int = 8,
        fold_bn: bool = True,
        dws_rescale: bool = False,
        train: Literal["thresholds", "pointwise", "both", "none"] = "thresholds",
        epochs: int = 8,
        batch: int = 32,
        lr: float = 1e-3,
        seed: int = 0,
        calib_size: int = 100,
        train_fraction: float = 0.1,
        use_wandb: bool = False,
    ):
        """
        Args:
            model: float model manifest (JSON with weight blobs next to it)
            data: IDX images the calibration and fine-tuning subsets are drawn from
            out_dir: directory for all stage artifacts and pipeline.log
            eval_images: IDX images for eval (defaults to data)
            eval_labels: IDX labels for top-1 accuracy
            mode: sym or asym activation quantization
            granularity: scalar (per-tensor) or vector (per-filter) weight thresholds
            dws_granularity: weight threshold granularity of DWS layers
            bits: bit width of weights and activations
            fold_bn: fold BatchNorm layers into the preceding layer
            dws_rescale: rescale DWS filters towards a common threshold
            train: parameter groups to fine-tune
            epochs: fine-tuning epochs
            batch: batch size
            lr: base learning rate
            seed: seed for subset selection and shuffling
            calib_size: number of calibration images
            train_fraction: fraction of data used for fine-tuning
            use_wandb: log fine-tuning to Weights & Biases
        """
        self.cfg = PipelineConfig(
            model=model, data=data, out_dir=out_dir, eval_images=eval_images, eval_labels=eval_labels,
            mode=mode, granularity=granularity, dws_granularity=dws_granularity, bits=bits,
            fold_bn=fold_bn, dws_rescale=dws_rescale, train=train, epochs=epochs, batch=batch, lr=lr,
            seed=seed, calib_size=calib_size, train_fraction=train_fraction, use_wandb=use_wandb,
        )
        self._handlers = []
        self._dataset = None
        self._setup_logging()

    @property
    def out_dir(self) -> Path:
        return self.cfg.out_dir

    def _setup_logging(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        root = logging.getLogger()
        root.setLevel(logging.INFO)
        formatter = logging.Formatter(LOG_FORMAT)
        file_handler = logging.FileHandler(self.out_dir / "pipeline.log")
        console_handler = logging.StreamHandler()
        for handler in (file_handler, console_handler):
            handler.setLevel(logging.INFO)
            handler.setFormatter(formatter)
            root.addHandler(handler)
            self._handlers.append(handler)

    def _close_logging(self):
        root = logging.getLogger()
        for handler in self._handlers:
            root.removeHandler(handler)
            handler.close()
        self._handlers = []

    # Artifacts

    @property
    def _model_path(self) -> Path:
        return self.out_dir / "model" / "model.json"

    def _read_artifact(self, name: str, stage: str) -> dict:
        path = self.out_dir / name
        if not path.exists():
            raise MissingPrerequisite(name, stage)
        artifact = read_json(path)
        if artifact.get("config_hash") != self.cfg.hash:
            raise MissingPrerequisite(f"{name} for the current configuration", stage)
        return artifact

    def _write_artifact(self, name: str, content: dict) -> Path:
        path = write_json(self.out_dir / name, {"config_hash": self.cfg.hash, **content})
        logger.info("Wrote %s", path)
        return path

    def _transformed_model(self) -> Graph:
        if not self._model_path.exists():
            raise MissingPrerequisite("transformed model", "transform")
        g = load_model(self._model_path)
        if g.metadata.get("config_hash") != self.cfg.hash:
            raise MissingPrerequisite("transformed model for the current configuration", "transform")
        return g

    def _params(self) -> tuple[dict, PointwiseScales | None]:
        "Fine-tuned params when available, else the calibrated ones."
        if (self.out_dir / "params.json").exists():
            artifact = self._read_artifact("params.json", "finetune")
        else:
            artifact = self._read_artifact("params_calibrated.json", "calibrate")
        scales = PointwiseScales.from_dict(artifact["scales"]) if artifact.get("scales") else None
        return params_from_dict(artifact["params"]), scales

    def _train_set(self) -> Dataset:
        if self._dataset is None:
            self._dataset = load_dataset(self.cfg.data)
        return self._dataset

    def _calibration_set(self) -> Dataset:
        return select_calibration(self._train_set(), self.cfg.calib_size, self.cfg.seed)

    # Stages

    def transform(self) -> Path:
        """Fold BatchNorm and optionally rescale DWS filters; writes model/ and transform_report.json."""
        cfg = self.cfg
        g = load_model(cfg.model)
        bn_ids = [layer.id for layer in g.layers_of_kind(LayerKind.BATCH_NORM)]
        if bn_ids and not cfg.fold_bn:
            raise FlagConflict(f"Model has BatchNorm layers {bn_ids}; quantization requires fold_bn")

        report = {"folded_batch_norm": bn_ids if cfg.fold_bn else [], "dws_rescale": None}
        if cfg.fold_bn:
            g = fold_batch_norm(g)
        if cfg.dws_rescale:
            g, rescale_report = dws_rescale(g, self._calibration_set(), batch_size=cfg.batch)
            report["dws_rescale"] = rescale_report.to_dict()

        save_model(g, self._model_path, metadata={"config_hash": cfg.hash})
        return self._write_artifact("transform_report.json", report)

    def calibrate(self) -> Path:
        """Collect activation ranges on the calibration set; writes calib_stats.json and params_calibrated.json."""
        cfg = self.cfg
        g = self._transformed_model()
        if cfg.granularity == "vector" and not g.layers_of_kind(*WEIGHTED_KINDS):
            warnings.warn("vector granularity requested but the model has no weighted layers", stacklevel=2)
        stats = calibrate(g, self._calibration_set(), batch_size=cfg.batch)
        params = build_params(g, stats, cfg.quant_config())
        self._write_artifact("calib_stats.json", {"stats": stats.to_dict()})
        return self._write_artifact(
            "params_calibrated.json",
            {"quant_config": cfg.quant_config().to_dict(), "params": params_to_dict(params), "scales": None},
        )

    def finetune(self) -> Path:
        """Distill the fake-quant model from the float one on an unlabeled subset; writes params.json."""
        cfg = self.cfg
        g = self._transformed_model()
        calibrated = self._read_artifact("params_calibrated.json", "calibrate")
        params = params_from_dict(calibrated["params"])
        if cfg.train == "none":
            logger.info("train=none: keeping the calibrated params")
            return self._write_artifact("params.json", {"params": calibrated["params"], "scales": None, "epoch_losses": []})

        subset = select_subset(self._train_set(), cfg.train_fraction, cfg.seed)
        params, scales, log = finetune(g, params, None, subset, cfg.train_config(), verbose=True)
        return self._write_artifact("params.json", {
            "params": params_to_dict(params),
            "scales": scales.to_dict() if scales is not None else None,
            "epoch_losses": log.epoch_losses,
        })

    def compile(self) -> Path:
        """Compile the quantized model to model.fatq."""
        g = self._transformed_model()
        params, scales = self._params()
        m = compile_model(g, params, scales)
        m.metadata = {"config_hash": self.cfg.hash}
        path = save_fatq(m, self.out_dir / "model.fatq")
        logger.info("Wrote %s", path)
        return path

    def eval(self, paths: list[Literal["float", "fakequant", "int8"]] | None = None) -> dict:
        """Top-1 accuracy (with eval_labels) and RMSE against the float logits for each path."""
        cfg = self.cfg
        paths = list(paths or EVAL_PATHS)
        unknown = set(paths) - set(EVAL_PATHS)
        if unknown:
            raise FlagConflict(f"Unknown eval paths {sorted(unknown)}")

        g_float = load_model(cfg.model)
        models = {"float": g_float.logits}
        if "fakequant" in paths:
            student = FakeQuantNetwork(self._transformed_model(), *self._params())
            models["fakequant"] = student
        if "int8" in paths:
            if not (self.out_dir / "model.fatq").exists():
                raise MissingPrerequisite("model.fatq", "compile")
            m = load_fatq(self.out_dir / "model.fatq")
            if m.metadata.get("config_hash") != cfg.hash:
                raise MissingPrerequisite("model.fatq for the current configuration", "compile")
            models["int8"] = lambda x: run_int8(m, x)

        data = load_dataset(cfg.eval_images, cfg.eval_labels) if cfg.eval_images else self._train_set()
        aggregator = Aggregator(paths)
        max_abs_err = dict.fromkeys(paths, 0.0)
        with torch.no_grad():
            for start in range(0, len(data), cfg.batch):
                x = data.images[start:start + cfg.batch]
                z_float = g_float.logits(x)
                for name in paths:
                    z = z_float if name == "float" else models[name](x)
                    max_abs_err[name] = max(max_abs_err[name], float((z - z_float).abs().max()))
                    metrics = {"sq_err": ((z - z_float) ** 2).sum(dim=1)}
                    if data.is_labeled:
                        metrics["top1"] = top1_correct(z, data.labels[start:start + cfg.batch])
                    aggregator.add_batch(name, metrics)

        results = {}
        for name, metrics in aggregator.by_group().items():
            results[name] = {
                "rmse": metrics["sq_err"] ** 0.5, "max_abs_err": max_abs_err[name], "top1": metrics.get("top1"),
            }
            logger.info(
                "%s: rmse %.6g, max |logit error| %.6g, top1 %s",
                name, results[name]["rmse"], results[name]["max_abs_err"], results[name]["top1"],
            )
        report = {"n_samples": len(data), "labeled": data.is_labeled, "results": results}
        self._write_artifact("eval_report.json", report)
        return report

    def run(self) -> dict:
        """All stages in order."""
        self.transform()
        self.calibrate()
        self.finetune()
        self.compile()
        return self.eval()
