"""Accuracy recovery on an MNIST-sized CNN.

Trains the float desk CNN, quantizes it to 8-bit scalar-symmetric with calibration only, then
fine-tunes (a) the thresholds and (b) the pointwise scales on an unlabeled 10% subset, and reports
top-1 accuracy and distillation RMSE of every variant.
"""
from dataclasses import replace
import logging
from pathlib import Path

import torch

from core import ARTIFACT_PATH, DATA_PATH
from core.datasets import Dataset, load_dataset, select_calibration, select_subset
from core.graph import Graph
from core.utils import write_json
from engine.int8 import compile as compile_model
from engine.int8 import run_int8
from quant.calibration import QuantConfig, build_params, calibrate
from quant.simulate import FakeQuantNetwork
from training.finetune import finetune
from training.losses import distillation_loss
from training.tiny_model import desk_cnn
from training.train_float import train_float
from training.train_utils import TrainConfig

logger = logging.getLogger(__name__)

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def find_mnist(data_path: Path = DATA_PATH) -> dict[str, Path] | None:
    "Paths of the four MNIST IDX files (plain or .gz) under data_path, or None if any is missing."
    found = {}
    for key, name in MNIST_FILES.items():
        for candidate in (data_path / name, data_path / f"{name}.gz", data_path / "mnist" / name, data_path / "mnist" / f"{name}.gz"):
            if candidate.exists():
                found[key] = candidate
                break
        else:
            return None
    return found


@torch.no_grad()
def evaluate(model, g_float: Graph, data: Dataset, batch_size: int = 500) -> dict:
    correct, sq_err = 0.0, 0.0
    for start in range(0, len(data), batch_size):
        x = data.images[start:start + batch_size]
        z, z_float = model(x), g_float.logits(x)
        correct += float((z.argmax(dim=1) == data.labels[start:start + batch_size]).sum())
        sq_err += float(((z - z_float) ** 2).sum())
    return {"top1": correct / len(data), "rmse": (sq_err / len(data)) ** 0.5}


def run_experiment(
    data_path: Path = DATA_PATH,
    out_dir: Path = ARTIFACT_PATH / "desk_scale",
    float_epochs: int = 3,
    epochs: int = 8,
    train_fraction: float = 0.1,
    calib_size: int = 100,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    verbose: bool = True,
) -> dict:
    files = find_mnist(Path(data_path))
    assert files is not None, f"MNIST IDX files not found under {data_path}"
    train = load_dataset(files["train_images"], files["train_labels"])
    test = load_dataset(files["test_images"], files["test_labels"])

    g_float = train_float(
        desk_cnn(seed=seed), train,
        TrainConfig(batch_size=batch_size, epochs=float_epochs, lr=3e-3, seed=seed, run_name="float"),
        verbose=verbose,
    )

    stats = calibrate(g_float, select_calibration(train, calib_size, seed))
    params = build_params(g_float, stats, QuantConfig(mode="sym", granularity="scalar", dws_granularity="scalar"))
    subset = select_subset(train, train_fraction, seed)
    tune_cfg = TrainConfig(batch_size=batch_size, epochs=epochs, lr=lr, seed=seed)

    tuned, _, tuned_log = finetune(g_float, params, None, subset, replace(tune_cfg, train="thresholds", run_name="thresholds"), verbose=verbose)
    pw_params, scales, pw_log = finetune(g_float, params, None, subset, replace(tune_cfg, train="pointwise", run_name="pointwise"), verbose=verbose)

    report = {"float": evaluate(g_float.logits, g_float, test)}
    variants = {
        "calibrated": (params, None),
        "thresholds": (tuned, None),
        "pointwise": (pw_params, scales),
    }
    for name, (p, s) in variants.items():
        report[f"{name}_fakequant"] = evaluate(FakeQuantNetwork(g_float, p, s), g_float, test)
        m = compile_model(g_float, p, s)
        report[f"{name}_int8"] = evaluate(lambda x, m=m: run_int8(m, x), g_float, test)

    with torch.no_grad():
        x = subset.images
        report["subset_rmse"] = {
            name: float(distillation_loss(g_float.logits(x), FakeQuantNetwork(g_float, p, s)(x)))
            for name, (p, s) in variants.items()
        }
    report["epoch_losses"] = {"thresholds": tuned_log.epoch_losses, "pointwise": pw_log.epoch_losses}

    write_json(Path(out_dir) / "report.json", report)
    for name, result in report.items():
        logger.info("%s: %s", name, result)
    return report


def main(
    data_path: Path = DATA_PATH,
    out_dir: Path = ARTIFACT_PATH / "desk_scale",
    float_epochs: int = 3,
    epochs: int = 8,
    seed: int = 0,
):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(message)s")
    report = run_experiment(data_path, out_dir, float_epochs=float_epochs, epochs=epochs, seed=seed)
    drop = report["float"]["top1"] - report["thresholds_int8"]["top1"]
    baseline_drop = report["float"]["top1"] - report["calibrated_int8"]["top1"]
    print(f"Float top-1 {report['float']['top1']:.4f}; int8 drop {drop:.4f} after fine-tuning, {baseline_drop:.4f} calibrated only")


if __name__ == "__main__":
    from jsonargparse import CLI
    CLI(main)
