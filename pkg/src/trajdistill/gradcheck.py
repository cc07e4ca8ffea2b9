"""Finite-difference check of the outer hypergradient on a tiny instance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import LabeledDataset, SyntheticDataset, init_synthetic
from .distill import (hotm_loss, per_unit_losses, select_easy, student_unroll,
                      total_loss)
from .expert import ExpertSegment, Trajectory, train_teacher
from .model import ArchSpec, layout_for


@dataclass
class TinyInstance:
    arch: ArchSpec
    segment: ExpertSegment
    synthetic: SyntheticDataset
    N: int = 2
    lam: float = 0.5
    kappa: float = float("inf")


@dataclass
class GradcheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    names: list[str]
    rel_errors: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max())

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def lines(self) -> list[str]:
        out = [f"{'entry':<14}{'analytic':>16}{'finite-diff':>16}{'rel err':>12}"]
        for n, a, f, e in zip(self.names, self.analytic, self.numeric, self.rel_errors):
            out.append(f"{n:<14}{a:>16.8e}{f:>16.8e}{e:>12.2e}")
        out.append(f"max relative error {self.max_rel_error:.3e} (tolerance {self.tol:g})")
        return out


def two_feature_clusters(per_class: int = 20, seed: int = 0) -> LabeledDataset:
    """Three Gaussian clusters in the plane, stored as [n, 2, 1, 1] 'images'."""
    rng = np.random.default_rng(seed)
    centers = np.array([[1.0, 0.0], [-0.5, 0.87], [-0.5, -0.87]])
    labels = np.repeat(np.arange(3), per_class)
    x = centers[labels] + rng.normal(0.0, 0.4, size=(labels.size, 2))
    return LabeledDataset(x.reshape(-1, 2, 1, 1).astype(np.float32), labels, 3)


def tiny_instance(seed: int = 0, alpha: float = 0.1) -> TinyInstance:
    """MLP d1 w8 on 2 features, 3 classes, IPC 1, N = M = 2; build under float64."""
    real = two_feature_clusters(seed=seed)
    arch = ArchSpec("mlp", 1, 8, (2,), 3, "none")
    traj: Trajectory = train_teacher(real, arch, epochs=3, teacher_lr=0.2, batch_size=16, seed=seed)
    snaps = traj.snapshots
    segment = ExpertSegment(snaps[0], snaps[1], snaps[2], t=0, M=2)
    syn = init_synthetic(real, ipc=1, seed=seed, alpha=alpha)
    return TinyInstance(arch, segment, syn)


def bearing_loss(inst: TinyInstance, images: np.ndarray | None = None,
                 alpha: float | None = None) -> T.Tensor:
    """Gradient-bearing objective (endpoint units + weighted angle term)."""
    syn = inst.synthetic
    if images is not None:
        syn = SyntheticDataset(images, syn.labels, alpha, syn.class_count)
    mid, final = student_unroll(inst.segment, syn, inst.N, inst.arch)
    units = per_unit_losses(final, inst.segment, "layer", layout_for(inst.arch))
    v = select_easy(units, inst.kappa)
    hotm = hotm_loss(inst.segment, mid, final)
    loss, _ = total_loss(units, v, inst.kappa, hotm, inst.lam, True, True)
    return loss


def run_gradcheck(h: float = 1e-3, tol: float = 1e-3, floor: float = 1e-8, seed: int = 0) -> GradcheckReport:
    with T.default_dtype(np.float64):
        inst = tiny_instance(seed)
        syn = inst.synthetic
        loss = bearing_loss(inst)
        grads = T.backward(loss, [syn.images, syn.alpha])
        analytic = np.concatenate([grads[syn.images].data.reshape(-1), [float(grads[syn.alpha].data)]])

        base_images = syn.images.data.copy()
        base_alpha = float(syn.alpha.data)
        numeric = []
        for k in range(base_images.size + 1):
            values = []
            for sign in (1.0, -1.0):
                images, alpha = base_images.copy(), base_alpha
                if k < base_images.size:
                    images.reshape(-1)[k] += sign * h
                else:
                    alpha += sign * h
                values.append(bearing_loss(inst, images, alpha).item())
            numeric.append((values[0] - values[1]) / (2 * h))
    numeric = np.asarray(numeric)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    names = [f"pixel[{i}]" for i in range(base_images.size)] + ["alpha"]
    return GradcheckReport(analytic, numeric, names, rel, tol)
