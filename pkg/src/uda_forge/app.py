"""Command-line entry point and the ablation driver.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import detector as det
from . import trainer as tr
from .config import ConfigError, RunConfig, load_config, save_config
from .evaluation import FrocCurve, read_froc_csv, render_froc_svg, write_detections_csv, write_froc_csv
from .synthdata import read_dataset, write_dataset

log = logging.getLogger("uda_forge")

GRAD_CHECK_TOL = 1e-4

# name -> (enable_ma, enable_acr); None marks the unadapted source model
ABLATION_ROWS: dict[str, tuple[bool, bool] | None] = {
    "source-only": None,
    "baseline": (False, False),
    "+MA": (True, False),
    "+ACR": (False, True),
    "+MA+ACR": (True, True),
}
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------

@dataclass
class AblationResult:
    fpi: tuple[float, ...]
    seeds: tuple[int, ...]
    runs: dict[str, list[list[float]]] = field(default_factory=dict)  # row -> per-seed recalls
    pseudo_counts: dict[str, list[list[int]]] = field(default_factory=dict)
    thresholds: dict[str, list[list[float]]] = field(default_factory=dict)

    def median(self, row: str) -> list[float]:
        return [statistics.median(r[k] for r in self.runs[row]) for k in range(len(self.fpi))]

    def median_at(self, row: str, fpi: float) -> float:
        return self.median(row)[list(self.fpi).index(fpi)]


def _ablation_job(args) -> tuple[str, int, list[float], list[int], list[float]]:
    cfg, name, ckpt_path = args
    flags = ABLATION_ROWS[name]
    source = tr.load_params(ckpt_path)
    data = tr.build_datasets(cfg)
    if flags is None:
        curve = tr.evaluate(source, data.target, cfg.score_threshold, cfg.nms_iou, cfg.fpi).curve
        return name, cfg.seed, [r for _, r in curve.points], [], []
    run_cfg = cfg.replace(enable_ma=flags[0], enable_acr=flags[1], froc_every=0)
    report = tr.adapt(run_cfg, source, data)
    curve = tr.evaluate(report.teacher, data.target, cfg.score_threshold, cfg.nms_iou, cfg.fpi).curve
    return name, cfg.seed, [r for _, r in curve.points], report.pseudo_counts, report.thresholds


def worker_count() -> int:
    raw = os.environ.get("UDA_FORGE_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        raise UsageError(f"UDA_FORGE_THREADS must be an integer, got {raw!r}") from None


def ablate(cfg: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, out_dir: str | Path | None = None,
           rows: Sequence[str] = tuple(ABLATION_ROWS), workers: int | None = None) -> AblationResult:
    """Pretrain once per seed, then evaluate every ablation row on the target domain."""
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise ValueError(f"unknown ablation rows {unknown}")
    out = Path(out_dir) if out_dir is not None else Path(".")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for seed in seeds:
        seed_cfg = cfg.replace(seed=seed)
        ckpt = ckpt_dir / f"source_seed{seed}.ckpt"
        params = tr.pretrain_source(seed_cfg)
        det.save_checkpoint(ckpt, det.prefixed(params, "teacher"))
        jobs.extend((seed_cfg, name, str(ckpt)) for name in rows)

    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]

    res = AblationResult(tuple(cfg.fpi), tuple(seeds))
    for name, _seed, recalls, counts, thresholds in results:
        res.runs.setdefault(name, []).append(recalls)
        res.pseudo_counts.setdefault(name, []).append(counts)
        res.thresholds.setdefault(name, []).append(thresholds)
    if out_dir is not None:
        write_ablation_csv(res, out / "ablation.csv")
        write_ablation_runs_csv(res, results, out / "ablation_runs.csv")
    return res


def _fpi_header(fpi) -> list[str]:
    return [f"R@{f:g}" for f in fpi]


def write_ablation_csv(res: AblationResult, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", *_fpi_header(res.fpi)])
        for name in res.runs:
            w.writerow([name, *(repr(float(v)) for v in res.median(name))])
    return path


def write_ablation_runs_csv(res: AblationResult, results, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "seed", *_fpi_header(res.fpi)])
        for name, seed, recalls, _, _ in results:
            w.writerow([name, seed, *(repr(float(v)) for v in recalls)])
    return path


# --------------------------------------------------------------------------
# Command line
# --------------------------------------------------------------------------

def _parse_fpi(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad FPI list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty FPI list")
    return values


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uda-forge", description="Teacher-student domain adaptation on synthetic lesion images.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="run configuration (TOML subset)")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    def switches(sp):
        sp.add_argument("--no-ma", action="store_true", help="fixed mask ratio instead of annealing")
        sp.add_argument("--no-acr", action="store_true", help="constant hard confidence threshold")
        sp.add_argument("--no-adv", action="store_true", help="disable adversarial alignment")
        sp.add_argument("--no-selective", action="store_true", help="disable selective retraining")

    def fpi(sp):
        sp.add_argument("--fpi", type=_parse_fpi, help="comma-separated FPI points")

    common(sub.add_parser("synth", help="write source, target and held-out datasets"))
    common(sub.add_parser("pretrain", help="supervised source training"))

    sp = sub.add_parser("adapt", help="teacher-student adaptation")
    common(sp)
    sp.add_argument("--source-ckpt", type=Path, help="source checkpoint (pretrained in-process when omitted)")
    switches(sp)
    fpi(sp)

    sp = sub.add_parser("eval", help="FROC and image metrics of a checkpoint")
    common(sp)
    sp.add_argument("--source-ckpt", "--ckpt", dest="ckpt", type=Path, required=True,
                    help="checkpoint to evaluate (teacher weights)")
    sp.add_argument("--data", type=Path, help="dataset directory written by synth (default: regenerate target)")
    fpi(sp)

    sp = sub.add_parser("froc-plot", help="render FROC CSV files as one SVG")
    sp.add_argument("--out", type=Path, required=True, help="SVG path")
    sp.add_argument("csv", nargs="+", type=Path, help="FROC CSV files")
    sp.add_argument("--labels", help="comma-separated legend labels (default: file stems)")

    sp = sub.add_parser("ablate", help="compare ablation rows over several seeds")
    common(sp)
    sp.add_argument("--seeds", type=_parse_seeds, default=DEFAULT_SEEDS, help="comma-separated seeds")
    sp.add_argument("--no-adv", action="store_true", help="disable adversarial alignment")
    sp.add_argument("--no-selective", action="store_true", help="disable selective retraining")
    fpi(sp)

    sp = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=1, help="number of random instances")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "fpi", None):
        changes["fpi"] = args.fpi
    for flag, name in (("no_ma", "enable_ma"), ("no_acr", "enable_acr"),
                       ("no_adv", "enable_adv"), ("no_selective", "enable_selective")):
        if getattr(args, flag, False):
            changes[name] = False
    return cfg.replace(**changes) if changes else cfg


def _cmd_synth(args, cfg: RunConfig) -> int:
    data = tr.build_datasets(cfg)
    meta = {"seed": cfg.seed}
    write_dataset(args.out / "source", data.source, cfg.source_spec, meta)
    write_dataset(args.out / "target", data.target, cfg.target_spec, meta)
    write_dataset(args.out / "source_holdout", data.source_holdout, cfg.source_spec, meta)
    print(f"wrote {len(data.source)} source, {len(data.target)} target and "
          f"{len(data.source_holdout)} held-out images to {args.out}")
    return 0


def _cmd_pretrain(args, cfg: RunConfig) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "config.toml")
    data = tr.build_datasets(cfg)
    params = tr.pretrain_source(cfg, data, args.out)
    res = tr.evaluate(params, data.source_holdout, cfg.score_threshold, cfg.nms_iou, cfg.fpi)
    write_froc_csv(res.curve, args.out / "froc_source_holdout.csv")
    print(f"checkpoint {args.out / 'source.ckpt'}")
    print("held-out source " + _fmt_points(res.curve))
    return 0


def _cmd_adapt(args, cfg: RunConfig) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "config.toml")
    data = tr.build_datasets(cfg)
    if args.source_ckpt is not None:
        source = tr.load_params(args.source_ckpt)
    else:
        source = tr.pretrain_source(cfg, data, args.out)
    report = tr.adapt(cfg, source, data, args.out)
    res = tr.evaluate(report.teacher, data.target, cfg.score_threshold, cfg.nms_iou, cfg.fpi)
    write_froc_csv(res.curve, args.out / "froc_target.csv")
    print(f"{len(report.rows)} iterations; outputs in {args.out}")
    print("target " + _fmt_points(res.curve))
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    params = tr.load_params(args.ckpt)
    if args.data is not None:
        samples = read_dataset(args.data)
    else:
        samples = tr.build_datasets(cfg).target
    res = tr.evaluate(params, samples, cfg.score_threshold, cfg.nms_iou, cfg.fpi)
    args.out.mkdir(parents=True, exist_ok=True)
    write_froc_csv(res.curve, args.out / "froc.csv")
    write_detections_csv(res.detections, args.out / "detections.csv")
    lines = [f"images={res.curve.n_images}", f"gt_boxes={res.curve.n_gt_boxes}",
             f"accuracy={res.accuracy!r}", f"f1={res.f1!r}"]
    lines += [f"R@{f:g}={r!r}" for f, r in res.curve.points]
    (args.out / "metrics.txt").write_text("\n".join(lines) + "\n")
    print(_fmt_points(res.curve) + f" accuracy={res.accuracy:.4f} f1={res.f1:.4f}")
    return 0


def _cmd_froc_plot(args) -> int:
    labels = args.labels.split(",") if args.labels else [p.stem for p in args.csv]
    if len(labels) != len(args.csv):
        raise UsageError("froc-plot: one label per CSV file required")
    curves = {}
    for label, path in zip(labels, args.csv):
        points = read_froc_csv(path)
        curves[label] = FrocCurve(points=points, n_images=0, n_gt_boxes=0)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    render_froc_svg(curves, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_ablate(args, cfg: RunConfig) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "config.toml")
    res = ablate(cfg, args.seeds, args.out)
    header = ["config", *_fpi_header(res.fpi)]
    print("  ".join(f"{h:>10}" for h in header))
    for name in res.runs:
        print("  ".join([f"{name:>10}", *(f"{v:>10.4f}" for v in res.median(name))]))
    return 0


def _cmd_grad_check(args) -> int:
    from .gradcheck import objective_grad_error

    if args.instances < 1:
        raise UsageError("grad-check: --instances must be at least 1")
    worst = max(objective_grad_error(args.seed + k) for k in range(args.instances))
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < GRAD_CHECK_TOL else 2


def _fmt_points(curve: FrocCurve) -> str:
    return " ".join(f"R@{f:g}={r:.4f}" for f, r in curve.points)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        if args.command == "froc-plot":
            return _cmd_froc_plot(args)
        if args.command == "grad-check":
            return _cmd_grad_check(args)
        cfg = _config(args)
        handler = {"synth": _cmd_synth, "pretrain": _cmd_pretrain, "adapt": _cmd_adapt,
                   "eval": _cmd_eval, "ablate": _cmd_ablate}[args.command]
        return handler(args, cfg)
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"failed: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


def main() -> None:
    logging.basicConfig(level=os.environ.get("UDA_FORGE_LOG", "WARNING"))
    sys.exit(run())
