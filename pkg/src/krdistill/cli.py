"""Command-line entry point: ``krdistill <command> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import RunConfig
from .data import distort_dataset, load_dataset, save_dataset
from .distill import evaluate, joint_train, train_supervised
from .errors import ConfigError, KRError
from .gradcheck import run_suite
from .metrics import MetricsWriter, read_metrics, render_table
from .models import build_network, preset

log = logging.getLogger("krdistill")

GRADCHECK_TOLERANCE = 1e-4


def _parser():
    ap = argparse.ArgumentParser(prog="krdistill", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        for flag in flags:
            if flag == "max-iter":
                p.add_argument("--max-iter", type=int)
            elif flag == "out-dir":
                p.add_argument("--out-dir", type=Path, default=Path("runs"))
            elif flag == "teacher-ckpt":
                p.add_argument("--teacher-ckpt", type=Path)
            elif flag == "preset":
                p.add_argument("--preset")
        return p

    common(sub.add_parser("train-teacher", help="fit a teacher preset and checkpoint it"),
           "max-iter", "out-dir", "preset")
    common(sub.add_parser("distill", help="run joint distillation from a teacher checkpoint"),
           "max-iter", "out-dir", "teacher-ckpt", "preset")
    ev = common(sub.add_parser("eval", help="print test accuracy of a checkpoint or fresh preset"),
                "preset")
    ev.add_argument("--ckpt", type=Path)
    dd = common(sub.add_parser("distort-dataset", help="write a noise-distorted copy of a dataset"),
                "out-dir")
    dd.add_argument("--sigma", type=float)
    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=20)
    rp = sub.add_parser("report", help="render a metrics CSV")
    rp.add_argument("metrics", type=Path)
    return ap


def _run_config(args):
    run = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        run.set("run.seed", args.seed)
    return run


def _dataset(run):
    data = load_dataset(run.dataset_source())
    if run["distortion.apply"]:
        data = distort_dataset(data, run.distortion())
    return data


def _network_from_checkpoint(ckpt):
    cfg = ckpt.config
    try:
        net_cfg = preset(cfg["preset"], tuple(cfg["input_shape"]), cfg["class_count"])
    except KeyError as exc:
        raise ConfigError(f"checkpoint config lacks {exc}") from None
    return ckpt_io.load_network_tensors(build_network(net_cfg, 0), ckpt.tensors)


def _net_meta(name, data):
    return {"preset": name, "input_shape": list(data.input_shape), "class_count": data.class_count}


def cmd_train_teacher(args):
    run = _run_config(args)
    if args.preset:
        run.set("run.teacher_preset", args.preset)
    if args.max_iter is not None:
        run.set("teacher.max_iter", args.max_iter)
    data = _dataset(run)
    name = run["run.teacher_preset"]
    net = build_network(preset(name, data.input_shape, data.class_count), run["run.seed"])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    with MetricsWriter(args.out_dir / "teacher_metrics.csv") as writer:
        report = train_supervised(net, data, run["teacher.max_iter"], run["teacher.lr"],
                                  batch_size=run["distill.batch_size"], seed=run["run.seed"],
                                  log_every=run["distill.log_every"], on_record=writer)
    meta = {**run.snapshot(), **_net_meta(name, data), "role": "teacher"}
    path = args.out_dir / "teacher.ckpt"
    ckpt_io.save_checkpoint(path, ckpt_io.Checkpoint(
        ckpt_io.network_tensors(net), meta, run["run.seed"], run["teacher.max_iter"]))
    acc = report.final.get("test_acc")
    print(f"teacher {name}: test_acc={acc if acc is not None else float('nan'):.4f} -> {path}")
    return 0


def cmd_distill(args):
    run = _run_config(args)
    if args.preset:
        run.set("run.student_preset", args.preset)
    if args.max_iter is not None:
        run.set("distill.max_iter", args.max_iter)
    teacher_path = args.teacher_ckpt or (Path(run["run.teacher_ckpt"]) if run["run.teacher_ckpt"]
                                         else None)
    data = _dataset(run)
    config = run.distill_config()
    if teacher_path is not None:
        teacher = _network_from_checkpoint(ckpt_io.load_checkpoint(teacher_path))
    elif config.max_iter == 0:
        teacher = build_network(preset(run["run.teacher_preset"], data.input_shape,
                                       data.class_count), run["run.seed"])
    else:
        raise ConfigError("distill needs --teacher-ckpt (or run.teacher_ckpt in the config)")
    name = run["run.student_preset"]
    student = build_network(preset(name, data.input_shape, data.class_count), run["run.seed"])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    with MetricsWriter(args.out_dir / "metrics.csv") as writer:
        report = joint_train(teacher, student, data, config, on_record=writer)
    meta = {**run.snapshot(), **_net_meta(name, data), "role": "student"}
    ckpt_io.save_checkpoint(args.out_dir / "student.ckpt", ckpt_io.Checkpoint(
        ckpt_io.network_tensors(student), meta, run["run.seed"], config.max_iter))
    acc = report.final.get("test_acc")
    print(f"student {name}: iterations={config.max_iter} "
          f"test_acc={acc if acc is not None else float('nan'):.4f} -> {args.out_dir}")
    return 0


def cmd_eval(args):
    run = _run_config(args)
    data = _dataset(run)
    if args.ckpt is not None:
        net = _network_from_checkpoint(ckpt_io.load_checkpoint(args.ckpt))
    else:
        name = args.preset or run["run.student_preset"]
        net = build_network(preset(name, data.input_shape, data.class_count), run["run.seed"])
    net.set_requires_grad(False)
    print(f"accuracy {evaluate(net, data.test.x, data.test.y):.4f}")
    return 0


def cmd_distort(args):
    run = _run_config(args)
    if args.sigma is not None:
        run.set("distortion.sigma", args.sigma)
    if args.seed is not None:
        run.set("distortion.seed", args.seed)
    data = distort_dataset(load_dataset(run.dataset_source()), run.distortion())
    out = save_dataset(data, args.out_dir, run["data.kind"])
    print(f"distorted {len(data.train)} train / {len(data.test)} test images "
          f"(sigma={run['distortion.sigma']}) -> {out}")
    return 0


def cmd_gradcheck(args):
    failed = 0
    for r in run_suite(args.seed, args.instances):
        ok = r.max_error < GRADCHECK_TOLERANCE
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {r.name:<24} max_rel_err={r.max_error:.3e} "
              f"({r.instances} instances)")
    return 1 if failed else 0


def cmd_report(args):
    rows = read_metrics(args.metrics)
    print(render_table(rows))
    if rows:
        last = rows[-1]
        print(f"\n{len(rows)} rows; final iter {last.iter}, train_acc {last.train_acc:.4f}"
              + (f", test_acc {last.test_acc:.4f}" if last.test_acc is not None else ""))
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "distort-dataset": cmd_distort,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"krdistill: config error: {exc}", file=sys.stderr)
        return 2
    except (KRError, OSError) as exc:
        print(f"krdistill: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
