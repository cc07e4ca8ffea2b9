"""Teacher training, trajectory persistence and expert segment sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .errors import InputError, IntegrityError, TrainingError, VersionError
from .model import (ArchSpec, ParamVector, forward, init_params, layout_for,
                    layout_from_json, layout_to_json)
from .tensor import Tensor

FORMAT_VERSION = 1


@dataclass
class Trajectory:
    snapshots: np.ndarray  # [T + 1, param_count]
    arch: ArchSpec
    seed: int
    epochs: int
    teacher_lr: float
    batch_size: int
    dataset_sha256: str = ""
    layout: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.layout = layout_for(self.arch)
        if self.snapshots.shape[0] != self.epochs + 1:
            raise IntegrityError(f"{self.snapshots.shape[0]} snapshots for {self.epochs} epochs")
        if self.snapshots.shape[1] != sum(e.length for e in self.layout):
            raise IntegrityError("snapshot width does not match the architecture layout")

    def __len__(self):
        return self.snapshots.shape[0]

    def snapshot(self, epoch: int) -> ParamVector:
        return ParamVector(self.snapshots[epoch], self.layout)


@dataclass(frozen=True)
class ExpertSegment:
    theta_start: np.ndarray
    theta_mid: np.ndarray
    theta_target: np.ndarray
    t: int
    M: int
    trajectory_index: int = 0

    @property
    def mid_epoch(self) -> int:
        return self.t + self.M // 2


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def sgd_train(arch: ArchSpec, params: np.ndarray, images: np.ndarray, labels: np.ndarray,
              epochs: int, lr: float, batch_size: int, rng: np.random.Generator,
              on_epoch=None) -> np.ndarray:
    """Plain SGD on cross-entropy over shuffled mini-batches.

    ``on_epoch(epoch, params, mean_loss)`` is called after each epoch.
    Raises TrainingError on a non-finite loss.
    """
    theta = Tensor(params, requires_grad=True, dtype=params.dtype)
    batch_size = min(batch_size, len(labels))
    for epoch in range(1, epochs + 1):
        losses = []
        for idx in _minibatches(len(labels), batch_size, rng):
            loss = T.softmax_cross_entropy(forward(arch, theta, Tensor._const(images[idx])), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite training loss in epoch {epoch}", epoch=epoch)
            (g,) = T.grad(loss, [theta])
            theta = Tensor(theta.data - lr * g.data, requires_grad=True, dtype=params.dtype)
            losses.append(float(loss.data))
        if not np.all(np.isfinite(theta.data)):
            raise TrainingError(f"non-finite parameters after epoch {epoch}", epoch=epoch)
        if on_epoch is not None:
            on_epoch(epoch, theta.data, float(np.mean(losses)))
    return theta.data


def train_teacher(real: LabeledDataset, arch: ArchSpec, epochs: int, teacher_lr: float = 0.01,
                  batch_size: int = 256, seed: int = 0) -> Trajectory:
    """Train one teacher and record a snapshot at init and after every epoch."""
    if epochs < 2:
        raise InputError("a trajectory needs at least 2 epochs")
    dtype = T.get_default_dtype()
    theta0 = init_params(arch, seed).values
    images = real.images.astype(dtype)
    snapshots = [theta0.copy()]
    # shuffling stream kept apart from the init stream
    rng = np.random.default_rng([seed, 1])
    sgd_train(arch, theta0, images, real.labels, epochs, teacher_lr, batch_size, rng,
              on_epoch=lambda e, p, l: snapshots.append(p.copy()))
    return Trajectory(np.stack(snapshots), arch, seed, epochs, teacher_lr, batch_size,
                      real.fingerprint())


def save_trajectory(traj: Trajectory, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "snapshots.bin").write_bytes(np.ascontiguousarray(traj.snapshots, dtype="<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": traj.arch.to_json(),
        "seed": traj.seed,
        "epochs": traj.epochs,
        "teacher_lr": traj.teacher_lr,
        "batch_size": traj.batch_size,
        "param_count": int(traj.snapshots.shape[1]),
        "layout": layout_to_json(traj.layout),
        "dataset_sha256": traj.dataset_sha256,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_trajectory(directory, arch: ArchSpec | None = None) -> Trajectory:
    """Load a trajectory; with ``arch`` given, its layout must match the stored one."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported trajectory format version {manifest.get('format_version')!r}")
    stored_arch = ArchSpec.from_json(manifest["arch"])
    layout = layout_from_json(manifest["layout"])
    if layout != layout_for(stored_arch):
        raise IntegrityError("stored layout disagrees with stored architecture")
    if arch is not None and layout_for(arch) != layout:
        raise IntegrityError(f"trajectory layout does not match architecture {arch.tag}")
    count, epochs = int(manifest["param_count"]), int(manifest["epochs"])
    if count != sum(e.length for e in layout):
        raise IntegrityError(f"param_count {count} disagrees with layout")
    raw = (directory / "snapshots.bin").read_bytes()
    if len(raw) != (epochs + 1) * count * 4:
        raise IntegrityError(
            f"snapshots.bin holds {len(raw) / (4 * count):g} records, manifest implies {epochs + 1}")
    snapshots = np.frombuffer(raw, dtype="<f4").reshape(epochs + 1, count).astype(np.float32)
    return Trajectory(snapshots, stored_arch, int(manifest["seed"]), epochs,
                      float(manifest["teacher_lr"]), int(manifest["batch_size"]),
                      manifest.get("dataset_sha256", ""))


def load_pool(directory, arch: ArchSpec | None = None) -> list[Trajectory]:
    """Load every trajectory directory below ``directory`` in sorted order."""
    dirs = sorted(p.parent for p in Path(directory).glob("*/manifest.json"))
    if not dirs:
        raise InputError(f"no trajectories found under {directory}")
    return [load_trajectory(d, arch) for d in dirs]


def sample_segment(pool: Sequence[Trajectory], t_min: int, t_max: int, M: int,
                   rng: np.random.Generator) -> ExpertSegment:
    if not pool:
        raise InputError("empty trajectory pool")
    if M < 2:
        raise InputError("M must be at least 2 so the midpoint is interior")
    if t_min < 0 or t_min > t_max:
        raise InputError(f"bad start range [{t_min}, {t_max}]")
    for traj in pool:
        if t_max + M > traj.epochs:
            raise InputError(f"t_max + M = {t_max + M} exceeds trajectory length {traj.epochs}")
    k = int(rng.integers(len(pool)))
    t = int(rng.integers(t_min, t_max + 1))
    snaps = pool[k].snapshots
    return ExpertSegment(snaps[t], snaps[t + M // 2], snaps[t + M], t, M, k)
