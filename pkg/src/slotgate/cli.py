"""Command-line entry points: generate / select / train / eval / ablate."""

import argparse
import os
import sys

import numpy as np


def _cmd_generate(args):
    from .scenes import load_scene_spec, replace_seed, write_dataset

    spec = load_scene_spec(args.spec)
    if args.seed is not None:
        spec = replace_seed(spec, args.seed)
    manifest = write_dataset(spec, args.count, args.out)
    print(f"wrote {manifest['count']} records to {args.out}")
    print(f"checksum={manifest['checksum']}")
    return 0


def _load_matrix(path):
    if path.endswith(".npy"):
        return np.load(path)
    return np.loadtxt(path, dtype=np.float64, ndmin=2)


def _cmd_select(args):
    from .selection import SelectionConfig, select_slots

    a = _load_matrix(args.attn)
    cfg = SelectionConfig(tau=args.tau, rho=args.rho, mu=args.mu,
                          epsilon=args.epsilon)
    result = select_slots(a, cfg)
    print("mask=" + ",".join(str(int(v)) for v in result.mask))
    print("selected=" + ",".join(str(s) for s in result.selected))
    for step in result.trace:
        print(
            f"step slot={step.slot} quality={step.quality:.10g} "
            f"novelty={step.novelty:.10g} accepted={int(step.accepted)} "
            f"coverage_after={step.coverage_after:.10g}"
        )
    return 0


def _cmd_train(args):
    from .training import TrainConfig, fit

    cfg = TrainConfig.load(args.config)
    ckpt, rows = fit(args.data, cfg, args.out, resume=args.resume)
    final = rows[-1] if rows else {}
    loss = final.get("loss", float("nan"))
    print(f"trained {len(rows)} epochs; final loss {loss:.6g}")
    print(f"checkpoint: {ckpt}")
    return 0


def _cmd_eval(args):
    from .metrics import evaluate, format_report, write_overlays
    from .scenes import load_dataset
    from .training import load_checkpoint

    report = evaluate(args.ckpt, args.data,
                      include_background=not args.ignore_background)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(format_report(report))
    if args.overlays > 0:
        model, _, _ = load_checkpoint(args.ckpt)
        _, samples = load_dataset(args.data)
        write_overlays(model, samples, os.path.join(args.out, "overlays"),
                       count=args.overlays)
    print(
        f"mbo_i={report.mbo_i:.4f} mbo_c={report.mbo_c:.4f} "
        f"miou={report.miou:.4f} k_corr={report.k_correlation:.4f}"
    )
    print(f"report: {report_path}")
    return 0


def _cmd_ablate(args):
    from .ablation import format_table, parse_plan_file, run_ablation

    plan, train_data, eval_data = parse_plan_file(args.plan)
    train_data = args.data or train_data
    eval_data = args.eval_data or eval_data or train_data
    if not train_data:
        print("error: plan file has no train_data= and --data not given",
              file=sys.stderr)
        return 2

    def progress(name, rep):
        print(f"  finished {name} replicate {rep}", flush=True)

    result = run_ablation(plan, train_data, eval_data, args.out,
                          progress=progress)
    print(format_table(result))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotgate",
        description="Adaptive-slot-count scene decomposition toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a procedural scene dataset")
    p.add_argument("--spec", required=True, help="scene spec file (key=value)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the spec's rng_seed")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("select", help="run greedy slot selection on a matrix")
    p.add_argument("--attn", required=True,
                   help="N×K matrix, plain text or .npy")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--mu", type=float, default=0.3)
    p.add_argument("--epsilon", type=float, default=1e-12)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ignore-background", action="store_true",
                   help="exclude the background mask from GT")
    p.add_argument("--overlays", type=int, default=0,
                   help="write this many side-by-side overlay panels")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="override plan train_data")
    p.add_argument("--eval-data", default=None, help="override plan eval_data")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
