from collections import defaultdict

import torch


class RunningAverage:
    def __init__(self, total=0.0, count=0):
        self.total = total
        self.count = count

    def add(self, numbers: torch.Tensor):
        numbers = torch.as_tensor(numbers)
        self.total += float(numbers.sum())
        self.count += numbers.numel()

    def get_average(self):
        if self.count == 0:
            return 0.0
        return self.total / self.count

    def __repr__(self):
        return f"RunningAverage(total={self.total}, count={self.count})"


class Aggregator:
    """
    Running per-sample averages of several metrics, kept separately for every group
    (e.g. the float, fake-quant and int8 paths of one evaluation).
    """
    def __init__(self, group_names: list[str]):
        self.group_names = group_names
        self._ra = defaultdict(RunningAverage)  # (metric_name, group_name) -> RunningAverage

    def add_batch(self, group_name: str, batch_metrics: dict[str, torch.Tensor]):
        assert group_name in self.group_names, f"Unknown group {group_name}"
        for metric_name, values in batch_metrics.items():
            self._ra[(metric_name, group_name)].add(values)

    def key_to_string(self, key):
        metric_name, group_name = key
        return "/".join((metric_name, group_name))

    def get_average(self) -> dict[str, float]:
        return {self.key_to_string(key): ra.get_average() for key, ra in sorted(self._ra.items())}

    def by_group(self) -> dict[str, dict[str, float]]:
        out = {name: {} for name in self.group_names}
        for (metric_name, group_name), ra in sorted(self._ra.items()):
            out[group_name][metric_name] = ra.get_average()
        return out


def top1_correct(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    "Per-sample 0/1 correctness of the arg-max prediction."
    return (logits.argmax(dim=1) == labels).to(torch.float64)
