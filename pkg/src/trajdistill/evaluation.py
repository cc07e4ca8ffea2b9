"""Train fresh networks on a (distilled) set and report test accuracy over seeds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import LabeledDataset, SyntheticDataset, sample_per_class
from .errors import InputError
from .expert import sgd_train
from .model import ArchSpec, forward, init_params
from .tensor import Tensor


@dataclass
class EvalReport:
    per_seed_accuracies: list[float]
    mean: float
    std: float
    arch: ArchSpec
    epochs: int
    eval_lr: float
    label: str = ""

    @classmethod
    def from_accuracies(cls, accs, arch, epochs, lr, label="") -> "EvalReport":
        accs = [float(a) for a in accs]
        # population std, as in mean±std tables
        return cls(accs, float(np.mean(accs)), float(np.std(accs)), arch, epochs, float(lr), label)

    def to_json(self) -> dict:
        return {"label": self.label, "arch": self.arch.to_json(), "epochs": self.epochs,
                "eval_lr": self.eval_lr, "per_seed_accuracies": self.per_seed_accuracies,
                "mean": self.mean, "std": self.std}

    def formatted(self) -> str:
        return f"{100 * self.mean:.2f}±{100 * self.std:.2f}"


def accuracy(arch: ArchSpec, params: np.ndarray, test: LabeledDataset, batch_size: int = 1024) -> float:
    correct = 0
    with T.no_grad():
        theta = Tensor._const(params)
        for lo in range(0, len(test), batch_size):
            images = test.images[lo:lo + batch_size].astype(params.dtype)
            logits = forward(arch, theta, Tensor._const(images)).data
            correct += int((logits.argmax(axis=1) == test.labels[lo:lo + batch_size]).sum())
    return correct / len(test)


def train_and_score(images: np.ndarray, labels: np.ndarray, test: LabeledDataset, arch: ArchSpec,
                    seed: int, epochs: int, lr: float, batch_size: int = 256) -> float:
    dtype = T.get_default_dtype()
    params = init_params(arch, seed).values
    rng = np.random.default_rng([seed, 3])
    params = sgd_train(arch, params, images.astype(dtype), labels, epochs, lr, batch_size, rng)
    return accuracy(arch, params, test)


def _check_compatible(train_classes: int, image_shape, test: LabeledDataset, arch: ArchSpec):
    if train_classes != test.class_count or arch.num_classes != test.class_count:
        raise InputError(
            f"class mismatch: train {train_classes}, test {test.class_count}, arch {arch.num_classes}")
    if tuple(image_shape) != tuple(test.image_shape):
        raise InputError(f"image shape mismatch: {tuple(image_shape)} vs {tuple(test.image_shape)}")


def evaluate(distilled: SyntheticDataset, test: LabeledDataset, arch: ArchSpec, seeds,
             epochs: int = 100, lr: float | None = None, batch_size: int = 256) -> EvalReport:
    """Train one fresh network per seed on the distilled set at its learned alpha (or ``lr``)."""
    seeds = list(seeds)
    if not seeds:
        raise InputError("at least one seed required")
    images = np.array(distilled.images.data, copy=True)
    _check_compatible(distilled.class_count, images.shape[1:], test, arch)
    lr = float(distilled.alpha.data) if lr is None else float(lr)
    accs = [train_and_score(images, distilled.labels, test, arch, s, epochs, lr, batch_size) for s in seeds]
    return EvalReport.from_accuracies(accs, arch, epochs, lr, "distilled")


def baseline_random_subset(real: LabeledDataset, ipc: int, seeds, arch: ArchSpec, epochs: int,
                           lr: float, test: LabeledDataset, batch_size: int = 256) -> EvalReport:
    """Same protocol as ``evaluate`` on ``ipc`` random real images per class, redrawn per seed."""
    seeds = list(seeds)
    if not seeds:
        raise InputError("at least one seed required")
    _check_compatible(real.class_count, real.image_shape, test, arch)
    accs = []
    for s in seeds:
        idx = sample_per_class(real, ipc, np.random.default_rng([s, 4]))
        accs.append(train_and_score(real.images[idx], real.labels[idx], test, arch, s, epochs, lr, batch_size))
    return EvalReport.from_accuracies(accs, arch, epochs, lr, f"random-{ipc}ipc")


def cross_arch(distilled: SyntheticDataset, test: LabeledDataset, archs, seeds, epochs: int = 100,
               lr: float | None = None) -> list[EvalReport]:
    return [evaluate(distilled, test, arch, seeds, epochs, lr) for arch in archs]


def format_table(reports) -> str:
    """Fixed-width rows of ``mean±std`` accuracy in percent."""
    names = [r.arch.tag if not r.label else f"{r.arch.tag} [{r.label}]" for r in reports]
    width = max([28] + [len(n) + 2 for n in names])
    lines = [f"{'model':<{width}}{'seeds':>6}  accuracy"]
    for name, r in zip(names, reports):
        lines.append(f"{name:<{width}}{len(r.per_seed_accuracies):>6}  {r.formatted()}")
    return "\n".join(lines)
