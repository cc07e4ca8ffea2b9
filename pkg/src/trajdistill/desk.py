"""Desk-scale blob experiment shared by the scripts and the acceptance suite.

3 classes of 8x8 blobs (600 train / 300 test), 10 ConvNet experts over 20
epochs, IPC 1 distilled for 2000 iterations, 5 evaluation seeds.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, generate_blobs
from .distill import DistillConfig, DistillResult, run_distillation
from .evaluation import EvalReport, baseline_random_subset, evaluate
from .expert import Trajectory, train_teacher
from .model import ArchSpec

CLASSES = 3
TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 100
HW = 8
TRAIN_SEED, TEST_SEED = 0, 1

EXPERTS = 10
TEACHER_EPOCHS = 20
TEACHER_LR = 0.01
TEACHER_BATCH = 32

EVAL_SEEDS = tuple(range(5))
EVAL_EPOCHS = 100
BASELINE_LR = 0.01  # equal to the initial student learning rate

# kappa_base is raised from the 5e-9 default: at that level no layer-sized
# unit is ever admitted within 2000 iterations
DESK_DISTILL = DistillConfig(iterations=2000, M=2, N=10, t_min=0, t_max=10, lam=0.5,
                             kappa_base=0.5, mu=1.5, P=500, granularity="layer",
                             outer_lr_images=100.0, outer_lr_alpha=1e-5, outer_momentum=0.5,
                             ipc=1, alpha_init=0.01, seed=0)


def convnet(input_shape=(1, HW, HW)) -> ArchSpec:
    return ArchSpec("convnet", 2, 16, input_shape, CLASSES, "instance")


def mlp(input_shape=(1, HW, HW)) -> ArchSpec:
    return ArchSpec("mlp", 1, 64, input_shape, CLASSES, "none")


def blobs() -> tuple[LabeledDataset, LabeledDataset]:
    train = generate_blobs(CLASSES, TRAIN_PER_CLASS, HW, TRAIN_SEED)
    test = generate_blobs(CLASSES, TEST_PER_CLASS, HW, TEST_SEED)
    return train, test


def expert_pool(train: LabeledDataset, arch: ArchSpec | None = None, count: int = EXPERTS) -> list[Trajectory]:
    arch = arch or convnet()
    return [train_teacher(train, arch, TEACHER_EPOCHS, TEACHER_LR, TEACHER_BATCH, seed) for seed in range(count)]


def distill_config(**overrides) -> DistillConfig:
    return dataclasses.replace(DESK_DISTILL, **overrides)


@dataclass
class VariantRun:
    name: str
    seed: int
    result: DistillResult
    report: EvalReport
    seconds: float

    def tm_first_last(self, frac: float = 0.1) -> tuple[float, float]:
        tm = np.array([e["l_tm"] for e in self.result.log])
        k = max(1, int(len(tm) * frac))
        return float(tm[:k].mean()), float(tm[-k:].mean())


ABLATIONS = {
    "full": {},
    "ho-only": {"e2c_enabled": False},
    "e2c-only": {"ho_enabled": False},
    "neither": {"e2c_enabled": False, "ho_enabled": False},
}


def run_variant(name: str, train, test, pool, seed: int = 0, arch: ArchSpec | None = None,
                **overrides) -> VariantRun:
    cfg = distill_config(seed=seed, **ABLATIONS[name], **overrides)
    start = time.perf_counter()
    result = run_distillation(train, pool, cfg)
    seconds = time.perf_counter() - start
    report = evaluate(result.synthetic, test, arch or pool[0].arch, EVAL_SEEDS, EVAL_EPOCHS)
    report.label = name
    return VariantRun(name, seed, result, report, seconds)


def random_baseline(train, test, lr: float = BASELINE_LR, arch: ArchSpec | None = None) -> EvalReport:
    return baseline_random_subset(train, DESK_DISTILL.ipc, EVAL_SEEDS, arch or convnet(),
                                  EVAL_EPOCHS, lr, test)
