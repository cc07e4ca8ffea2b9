"""Trajectory matching with an angle term and staged unit selection.

One outer iteration samples an expert segment (start, midpoint, target),
unrolls N differentiable SGD steps of a student on the synthetic set, and
scores the student against the expert in two ways:

* per-unit normalized endpoint distances, admitted into the loss only while
  below a threshold kappa that grows geometrically (easy-to-complex);
* the cosine of the angle the trajectory makes at its midpoint, compared
  between expert and student through a smooth-L1 penalty (high-order term).

The gradient of that loss with respect to the synthetic images and the
student learning rate drives a momentum-SGD update of both.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledDataset, SyntheticDataset, init_synthetic
from .errors import (ConfigError, DegenerateAngleError, DegenerateSegmentError,
                     DivergenceError, InputError)
from .expert import ExpertSegment, Trajectory, sample_segment
from .model import ArchSpec, forward, layer_ranges, layout_for
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    iterations: int = 5000
    M: int = 2
    N: int = 20
    t_min: int = 0
    t_max: int = 10
    lam: float = 0.5
    kappa_base: float = 5e-9
    mu: float = 1.5
    P: int = 500
    granularity: str = "layer"
    outer_lr_images: float = 100.0
    outer_lr_alpha: float = 1e-5
    outer_momentum: float = 0.5
    eps: float = 1e-12
    ho_enabled: bool = True
    e2c_enabled: bool = True
    seed: int = 0
    ipc: int = 1
    alpha_init: float = 0.01
    max_resample: int = 10
    log_units: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self, teacher_epochs: int | None = None) -> "DistillConfig":
        checks = [
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.M >= 2, "M must be >= 2 so the expert midpoint is interior"),
            (self.N >= 2, "N must be >= 2 so the student midpoint is interior"),
            (0 <= self.t_min <= self.t_max, "need 0 <= t_min <= t_max"),
            (self.lam >= 0, "lambda must be >= 0"),
            (self.kappa_base > 0, "kappa_base must be > 0"),
            (self.mu > 1, f"growth factor mu must satisfy mu > 1 (got {self.mu})"),
            (self.P >= 1, "P must be a positive integer"),
            (self.granularity in ("layer", "scalar"), "granularity must be 'layer' or 'scalar'"),
            (self.outer_lr_images > 0 and self.outer_lr_alpha > 0, "outer learning rates must be > 0"),
            (0 <= self.outer_momentum < 1, "outer_momentum must lie in [0, 1)"),
            (self.eps > 0, "eps must be > 0"),
            (self.ipc >= 1, "ipc must be >= 1"),
            (self.alpha_init > 0, "alpha_init must be > 0"),
            (self.max_resample >= 1, "max_resample must be >= 1"),
        ]
        if teacher_epochs is not None:
            checks.append((self.t_max + self.M <= teacher_epochs,
                           f"t_max + M = {self.t_max + self.M} exceeds teacher epochs {teacher_epochs}"))
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "DistillConfig":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown distillation settings: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class SelectionState:
    kappa: float
    v: np.ndarray
    iteration: int


@dataclass
class UnitLosses:
    values: Tensor  # [K], graph-attached
    unit_map: list[tuple[str, tuple[int, int]]]

    def __len__(self):
        return self.values.shape[0]

    def numpy(self) -> np.ndarray:
        return np.asarray(self.values.data, dtype=np.float64)


# -- inner loop ----------------------------------------------------------------

def student_unroll(segment: ExpertSegment, ds: SyntheticDataset, N: int,
                   arch: ArchSpec) -> tuple[Tensor, Tensor]:
    """N full-batch SGD steps from the expert start; returns (after N//2, after N).

    Both outputs stay differentiable functions of ``ds.images`` and ``ds.alpha``.
    """
    if N < 2:
        raise InputError("N must be >= 2")
    # a leaf so inner gradients can be taken; it carries no outer gradient
    theta = Tensor(segment.theta_start, requires_grad=True, dtype=ds.images.dtype)
    mid = None
    for step in range(1, N + 1):
        loss = T.softmax_cross_entropy(forward(arch, theta, ds.images), ds.labels)
        (g,) = T.grad(loss, [theta], create_graph=True)
        theta = theta - ds.alpha * g
        if not np.all(np.isfinite(theta.data)):
            raise DivergenceError(f"student parameters became non-finite at step {step}", step=step)
        if step == N // 2:
            mid = theta
    return mid, theta


# -- matching losses -----------------------------------------------------------

def _const(x, like: Tensor) -> Tensor:
    return Tensor._const(np.asarray(x, dtype=like.dtype))


def matching_loss(theta_hat_final: Tensor, segment: ExpertSegment, eps: float = 1e-12) -> Tensor:
    """||student_end - expert_target||^2 / ||expert_target - expert_start||^2."""
    start = np.asarray(segment.theta_start, dtype=theta_hat_final.dtype)
    target = np.asarray(segment.theta_target, dtype=theta_hat_final.dtype)
    if target.shape != tuple(theta_hat_final.shape):
        raise InputError("student and expert parameter layouts differ")
    denom = np.sum(np.square(target - start))
    if not denom >= eps:
        raise DegenerateSegmentError(f"expert displacement {denom:.3g} below eps")
    num = T.sum(T.square(theta_hat_final - _const(target, theta_hat_final)))
    return num / _const(denom, theta_hat_final)


def matching_units(layout, granularity: str) -> list[tuple[str, tuple[int, int]]]:
    if granularity == "layer":
        return [(name, (lo, hi)) for name, lo, hi in layer_ranges(layout)]
    if granularity == "scalar":
        total = sum(e.length for e in layout)
        return [(f"p{i}", (i, i + 1)) for i in range(total)]
    raise InputError(f"unknown granularity {granularity!r}")


def per_unit_losses(theta_hat_final: Tensor, segment: ExpertSegment, granularity: str,
                    layout, eps: float = 1e-12) -> UnitLosses:
    """Endpoint matching loss restricted to each unit, with eps-guarded denominators."""
    dtype = theta_hat_final.dtype
    start = np.asarray(segment.theta_start, dtype=dtype)
    target = np.asarray(segment.theta_target, dtype=dtype)
    sq = T.square(theta_hat_final - _const(target, theta_hat_final))
    disp = np.square(target - start)
    units = matching_units(layout, granularity)
    if granularity == "scalar":
        values = sq / _const(disp + eps, theta_hat_final)
    else:
        membership = np.zeros((len(units), disp.size), dtype=dtype)
        denom = np.zeros(len(units), dtype=dtype)
        for k, (_, (lo, hi)) in enumerate(units):
            membership[k, lo:hi] = 1.0
            denom[k] = disp[lo:hi].sum()
        summed = T.matmul(_const(membership, theta_hat_final), sq.reshape(-1, 1)).reshape(-1)
        values = summed / _const(denom + eps, theta_hat_final)
    return UnitLosses(values, units)


def kappa_at(iteration: int, cfg: DistillConfig) -> float:
    if iteration < 0:
        raise InputError("iteration must be >= 0")
    return cfg.kappa_base * cfg.mu ** (iteration // cfg.P)


def select_easy(losses: UnitLosses | np.ndarray, kappa: float) -> np.ndarray:
    """1 where the unit loss is strictly below kappa, else 0 (never differentiated)."""
    values = losses.numpy() if isinstance(losses, UnitLosses) else np.asarray(losses, dtype=np.float64)
    return (values < kappa).astype(np.float64)


def high_order_potential(a, b, c, eps: float = 1e-12) -> Tensor:
    """Cosine of the angle at ``b`` formed by ``a`` and ``c`` over full flat vectors."""
    like = next((x for x in (a, b, c) if isinstance(x, Tensor)), None)
    dtype = like.dtype if like is not None else np.result_type(np.asarray(a), np.float32)
    a, b, c = (x if isinstance(x, Tensor) else Tensor._const(np.asarray(x, dtype=dtype)) for x in (a, b, c))
    u, w = a - b, c - b
    nu, nw = T.sqrt(T.sum(T.square(u))), T.sqrt(T.sum(T.square(w)))
    if not (nu.item() >= eps and nw.item() >= eps):
        raise DegenerateAngleError("angle leg shorter than eps")
    return T.sum((u / nu) * (w / nw))


def smooth_l1(d: Tensor) -> Tensor:
    """0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    x = d.item()
    if abs(x) < 1.0:
        return T.square(d) * 0.5
    return d * (1.0 if x > 0 else -1.0) - 0.5


def hotm_loss(segment: ExpertSegment, theta_hat_mid: Tensor, theta_hat_final: Tensor,
              eps: float = 1e-12) -> Tensor:
    """Smooth-L1 gap between the expert and student midpoint angles.

    The expert angle is a constant; raises DegenerateAngleError when a leg vanishes.
    """
    expert = high_order_potential(np.asarray(segment.theta_start, dtype=np.float64),
                                  np.asarray(segment.theta_mid, dtype=np.float64),
                                  np.asarray(segment.theta_target, dtype=np.float64), eps).item()
    start = _const(segment.theta_start, theta_hat_final)
    student = high_order_potential(start, theta_hat_mid, theta_hat_final, eps)
    return smooth_l1(student - expert)


def total_loss(unit_losses: UnitLosses | None, v: np.ndarray | None, kappa: float,
               hotm: Tensor | None, lam: float, e2c_enabled: bool = True,
               ho_enabled: bool = True, global_tm: Tensor | None = None) -> tuple[Tensor, float]:
    """(gradient-bearing loss, reported objective).

    The reported objective adds -kappa * sum(v), which is constant for fixed v
    and therefore left out of the gradient-bearing value.
    """
    if e2c_enabled:
        v = np.asarray(v, dtype=np.float64)
        values = unit_losses.values
        bearing = T.sum(values * _const(v, values))
        offset = -kappa * float(v.sum())
    else:
        if global_tm is None:
            raise InputError("global matching loss required when easy-to-complex is disabled")
        bearing = global_tm
        offset = 0.0
    if ho_enabled and hotm is not None:
        bearing = bearing + hotm * lam
    return bearing, bearing.item() + offset


# -- outer loop ----------------------------------------------------------------

@dataclass
class IterationState:
    """Quantities of one outer iteration before the synthetic-set update."""
    segment: ExpertSegment
    loss: Tensor
    reported: float
    l_tm: float
    l_hotm: float
    unit_losses: np.ndarray
    selection: SelectionState


def distill_step(ds: SyntheticDataset, pool: Sequence[Trajectory], cfg: DistillConfig,
                 iteration: int, rng: np.random.Generator) -> IterationState:
    arch = pool[0].arch
    layout = layout_for(arch)
    for attempt in range(cfg.max_resample):
        segment = sample_segment(pool, cfg.t_min, cfg.t_max, cfg.M, rng)
        denom = np.sum(np.square(np.asarray(segment.theta_target, np.float64) - segment.theta_start))
        if denom >= cfg.eps:
            break
        log.warning("iteration %d: degenerate expert segment at t=%d, resampling", iteration, segment.t)
    else:
        raise DegenerateSegmentError(f"no usable expert segment after {cfg.max_resample} draws")

    mid, final = student_unroll(segment, ds, cfg.N, arch)
    global_tm = matching_loss(final, segment, cfg.eps)
    units = per_unit_losses(final, segment, cfg.granularity, layout, cfg.eps)
    kappa = kappa_at(iteration, cfg)
    v = select_easy(units, kappa)

    hotm = None
    if cfg.ho_enabled:
        try:
            hotm = hotm_loss(segment, mid, final, cfg.eps)
        except DegenerateAngleError:
            log.debug("iteration %d: degenerate angle, high-order term set to 0", iteration)
    loss, reported = total_loss(units, v, kappa, hotm, cfg.lam, cfg.e2c_enabled,
                                cfg.ho_enabled, global_tm)
    return IterationState(segment, loss, reported, global_tm.item(),
                          hotm.item() if hotm is not None else 0.0,
                          units.numpy(), SelectionState(kappa, v, iteration))


@dataclass
class DistillResult:
    synthetic: SyntheticDataset
    log: list[dict] = field(default_factory=list)


def run_distillation(real: LabeledDataset, pool: Sequence[Trajectory], cfg: DistillConfig,
                     log_path=None, on_iteration: Callable[[dict], None] | None = None) -> DistillResult:
    """Optimize a synthetic set against the expert pool; deterministic per ``cfg.seed``."""
    if not pool:
        raise InputError("empty trajectory pool")
    arch = pool[0].arch
    if any(traj.arch != arch for traj in pool):
        raise InputError("all expert trajectories must share one architecture")
    cfg.validate(min(traj.epochs for traj in pool))
    if real.class_count != arch.num_classes:
        raise InputError(f"dataset has {real.class_count} classes, experts expect {arch.num_classes}")

    ds = init_synthetic(real, cfg.ipc, cfg.seed, cfg.alpha_init)
    rng = np.random.default_rng([cfg.seed, 2])
    buf_images = np.zeros_like(ds.images.data)
    buf_alpha = 0.0
    result = DistillResult(ds)
    sink = open(log_path, "w") if log_path is not None else None
    try:
        for i in range(cfg.iterations):
            state = distill_step(ds, pool, cfg, i, rng)
            if not math.isfinite(state.reported):
                raise DivergenceError(f"non-finite loss at iteration {i}", iteration=i)
            grads = T.backward(state.loss, [ds.images, ds.alpha])
            g_images, g_alpha = grads[ds.images].data, float(grads[ds.alpha].data)
            if not (np.all(np.isfinite(g_images)) and math.isfinite(g_alpha)):
                raise DivergenceError(f"non-finite hypergradient at iteration {i}", iteration=i)

            buf_images = cfg.outer_momentum * buf_images + g_images
            buf_alpha = cfg.outer_momentum * buf_alpha + g_alpha
            ds.images.data = (ds.images.data - cfg.outer_lr_images * buf_images).astype(ds.images.dtype)
            ds.alpha.data = np.asarray(ds.alpha.data - cfg.outer_lr_alpha * buf_alpha, dtype=ds.alpha.dtype)
            ds.clamp_alpha()

            sel = state.selection
            entry = {
                "iteration": i,
                "loss": state.reported,
                "l_tm": state.l_tm,
                "l_hotm": state.l_hotm,
                "selected_fraction": float(sel.v.mean()),
                "kappa": sel.kappa,
                "alpha": float(ds.alpha.data),
                "t": state.segment.t,
                "trajectory": state.segment.trajectory_index,
            }
            if cfg.log_units:
                entry["unit_losses"] = state.unit_losses.tolist()
                entry["v"] = sel.v.astype(int).tolist()
            result.log.append(entry)
            if sink is not None:
                sink.write(json.dumps(entry) + "\n")
                sink.flush()
            if on_iteration is not None:
                on_iteration(entry)
    finally:
        if sink is not None:
            sink.close()
    return result


def save_distilled(result: DistillResult, cfg: DistillConfig, directory) -> Path:
    """Dataset files plus alpha.json and the resolved config."""
    out = result.synthetic.save(directory)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return out
