import pytest

from scripts.desk_scale import run_experiment


@pytest.fixture(scope="module")
def report(request, tmp_path_factory):
    mnist_path = request.getfixturevalue("mnist_path")
    return run_experiment(mnist_path, tmp_path_factory.mktemp("desk_scale"), verbose=False)


@pytest.mark.slow
def test_threshold_finetuning_recovers_accuracy(report):
    float_top1 = report["float"]["top1"]
    assert float_top1 >= 0.98
    calibrated_drop = float_top1 - report["calibrated_int8"]["top1"]
    tuned_drop = float_top1 - report["thresholds_int8"]["top1"]
    assert calibrated_drop > 0
    assert tuned_drop <= 0.01
    assert tuned_drop <= calibrated_drop


@pytest.mark.slow
def test_pointwise_scales_reduce_distillation_error(report):
    rmse = report["subset_rmse"]
    assert rmse["pointwise"] < rmse["calibrated"]


@pytest.mark.slow
def test_fakequant_and_int8_agree(report):
    for name in ("calibrated", "thresholds", "pointwise"):
        assert report[f"{name}_int8"]["top1"] == pytest.approx(report[f"{name}_fakequant"]["top1"], abs=1e-4)
