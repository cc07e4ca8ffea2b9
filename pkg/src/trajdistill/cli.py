"""Command-line pipeline: gen-data, gen-experts, distill, eval, gradcheck.

Exit codes: 0 ok, 2 usage/config, 3 IO/training, 4 divergence, 5 check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path


from .data import SyntheticDataset, generate_blobs, load_dataset, save_dataset
from .distill import DistillConfig, run_distillation, save_distilled
from .errors import (ConfigError, DegenerateSegmentError, DimensionError, DivergenceError,
                     InputError, IntegrityError, TrainingError)
from .evaluation import EvalReport, evaluate, format_table
from .expert import load_pool, save_trajectory, train_teacher
from .gradcheck import run_gradcheck
from .model import ArchSpec

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4, 5

log = logging.getLogger("trajdistill")


@dataclass
class TeacherSettings:
    arch: str = "convnet-d2-w16"
    count: int = 10
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 256
    seed: int = 0


@dataclass
class EvalSettings:
    archs: list[str] = field(default_factory=lambda: ["convnet-d2-w16"])
    seeds: int = 5
    epochs: int = 100
    lr: float | None = None


@dataclass
class RunConfig:
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"teacher": dataclasses.asdict(self.teacher), "distill": self.distill.to_dict(),
                "eval": dataclasses.asdict(self.eval), "paths": dict(self.paths)}

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        """Accept a full run document or a flat distillation config."""
        if "distill" not in obj and "teacher" not in obj and "eval" not in obj:
            return cls(distill=DistillConfig.from_dict(obj))
        try:
            return cls(teacher=TeacherSettings(**obj.get("teacher", {})),
                       distill=DistillConfig.from_dict(obj.get("distill", {})),
                       eval=EvalSettings(**obj.get("eval", {})),
                       paths=dict(obj.get("paths", {})))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = generate_blobs(args.classes, args.per_class, args.hw, args.seed, channels=args.channels,
                        jitter=args.jitter, noise=args.noise)
    out = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images ({args.classes} classes, {args.hw}x{args.hw}) to {out}")
    return EXIT_OK


def _train_one(job):
    data_dir, arch_json, epochs, lr, batch_size, seed, out = job
    real = load_dataset(data_dir)
    traj = train_teacher(real, ArchSpec.from_json(arch_json), epochs, lr, batch_size, seed)
    save_trajectory(traj, out)
    return str(out)


def cmd_gen_experts(args) -> int:
    real = load_dataset(args.data)
    arch = ArchSpec.parse(args.arch, real.image_shape, real.class_count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(args.data, arch.to_json(), args.epochs, args.lr, args.batch_size, seed,
             out / f"expert_{seed:04d}") for seed in range(args.seed, args.seed + args.count)]
    for path in _parallel_map(_train_one, jobs, args.jobs):
        log.info("wrote %s", path)
    teacher = TeacherSettings(args.arch, args.count, args.epochs, args.lr, args.batch_size, args.seed)
    _write_json(out / "config.json", {"teacher": dataclasses.asdict(teacher),
                                      "paths": {"data": str(args.data), "out": str(out)}})
    print(f"wrote {args.count} expert trajectories to {out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text()) if args.config else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    run = RunConfig.from_dict(raw)
    overrides = {k: getattr(args, k) for k in ("iterations", "seed", "ipc") if getattr(args, k) is not None}
    if overrides:
        run.distill = dataclasses.replace(run.distill, **overrides)
    run.paths.update(experts=str(args.experts), data=str(args.data), out=str(args.out))

    real = load_dataset(args.data)
    pool = load_pool(args.experts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_distillation(real, pool, run.distill, log_path=out / "distill_log.jsonl")
    save_distilled(result, run.distill, out)
    _write_json(out / "config.json", run.to_dict())
    print(f"distilled {len(result.synthetic.labels)} images in {run.distill.iterations} iterations; "
          f"alpha={float(result.synthetic.alpha.data):.6g}; wrote {out}")
    return EXIT_OK


def _eval_one(job):
    distilled_dir, test_dir, arch_json, seeds, epochs, lr = job
    distilled = SyntheticDataset.load(distilled_dir)
    test = load_dataset(test_dir)
    return evaluate(distilled, test, ArchSpec.from_json(arch_json), seeds, epochs, lr).to_json()


def cmd_eval(args) -> int:
    distilled = SyntheticDataset.load(args.distilled)
    test = load_dataset(args.test)
    if distilled.images.shape[1:] != test.image_shape:
        raise InputError(f"distilled images {distilled.images.shape[1:]} vs test images {test.image_shape}")
    archs = [ArchSpec.parse(s, test.image_shape, test.class_count) for s in args.arch.split(",")]
    seeds = list(range(args.seed, args.seed + args.seeds))
    jobs = [(args.distilled, args.test, a.to_json(), seeds, args.epochs, args.lr) for a in archs]
    reports = []
    for obj in _parallel_map(_eval_one, jobs, args.jobs):
        reports.append(EvalReport(obj["per_seed_accuracies"], obj["mean"], obj["std"],
                                  ArchSpec.from_json(obj["arch"]), obj["epochs"], obj["eval_lr"]))
    print(format_table(reports))
    report_path = Path(args.report) if args.report else Path(args.distilled) / "eval_report.json"
    _write_json(report_path, {"reports": [r.to_json() for r in reports]})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(h=args.h, tol=args.tol)
    for line in report.lines():
        print(line)
    if not report.passed:
        print(f"FAILED: max relative error {report.max_rel_error:.3e} >= {args.tol:g}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajdistill", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a blob-image dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int, default=3, help="number of classes (default 3)")
    p.add_argument("--per-class", type=int, default=200, help="images per class (default 200)")
    p.add_argument("--hw", type=int, default=8, help="image height and width (default 8)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--channels", type=int, default=1, help="image channels (default 1)")
    p.add_argument("--jitter", type=float, default=0.5, help="std of blob center jitter in pixels")
    p.add_argument("--noise", type=float, default=0.4, help="std of per-pixel Gaussian noise")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("gen-experts", help="train teachers and record their trajectories")
    p.add_argument("--data", required=True, help="real training dataset directory")
    p.add_argument("--out", required=True, help="directory receiving one subdirectory per expert")
    p.add_argument("--count", type=int, default=10, help="number of teachers (default 10)")
    p.add_argument("--epochs", type=int, default=20, help="epochs per teacher, T (default 20)")
    p.add_argument("--arch", default="convnet-d2-w16", help="architecture, e.g. convnet-d2-w16 or mlp-d1-w64")
    p.add_argument("--seed", type=int, default=0, help="first teacher seed; teachers use seed..seed+count-1")
    p.add_argument("--lr", type=float, default=0.01, help="teacher SGD learning rate (default 0.01)")
    p.add_argument("--batch-size", type=int, default=256, help="teacher mini-batch size (default 256)")
    p.add_argument("--jobs", type=int, default=1, help="parallel teacher trainings (default 1)")
    p.set_defaults(fn=cmd_gen_experts)

    p = sub.add_parser("distill", help="optimize a synthetic dataset against expert trajectories")
    p.add_argument("--config", help="JSON config (flat distillation settings or a full run document)")
    p.add_argument("--experts", required=True, help="directory of expert trajectories")
    p.add_argument("--data", required=True, help="real training dataset directory")
    p.add_argument("--out", required=True, help="output directory for the distilled set and logs")
    p.add_argument("--iterations", type=int, help="override the number of outer iterations")
    p.add_argument("--seed", type=int, help="override the distillation seed")
    p.add_argument("--ipc", type=int, help="override images per class")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="train fresh networks on a distilled set and report accuracy")
    p.add_argument("--distilled", required=True, help="distilled dataset directory (with alpha.json)")
    p.add_argument("--test", required=True, help="test dataset directory")
    p.add_argument("--arch", default="convnet-d2-w16", help="comma-separated architectures")
    p.add_argument("--seeds", type=int, default=5, help="number of evaluation seeds (default 5)")
    p.add_argument("--seed", type=int, default=0, help="first evaluation seed (default 0)")
    p.add_argument("--epochs", type=int, default=100, help="training epochs per network (default 100)")
    p.add_argument("--lr", type=float, help="learning rate override (default: learned alpha)")
    p.add_argument("--report", help="report JSON path (default DISTILLED/eval_report.json)")
    p.add_argument("--jobs", type=int, default=1, help="parallel architecture evaluations (default 1)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare hypergradients with central finite differences")
    p.add_argument("--scale", choices=["tiny"], default="tiny", help="instance size (only 'tiny')")
    p.add_argument("--tol", type=float, default=1e-3, help="relative error tolerance (default 1e-3)")
    p.add_argument("--h", type=float, default=1e-3, help="finite-difference step (default 1e-3)")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, InputError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, DegenerateSegmentError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (TrainingError, IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
