"""Command-line entry point.

Every subcommand works on one run directory (``--out-dir``). When ``--config``
is omitted the run directory's own ``config.ini`` is reused if present.

Exit codes: 0 success, 1 validation, 2 I/O or missing prerequisite, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .diffusion import NumericalError, load_checkpoint, sample_many
from .pipeline import ModeSpec
from .prefcore import ValidationError, atomic_write_text
from .runner import STAGES, Run, run_pipeline

log = logging.getLogger("votedpo")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


def _modes(text: str) -> tuple[ModeSpec, ...]:
    try:
        return tuple(ModeSpec.parse(m) for m in text.split(",") if m.strip())
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _stages(text: str) -> tuple[str, ...]:
    stages = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown stage(s) {', '.join(bad)}; choose from {', '.join(STAGES)}")
    return stages


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand. The subcommand
    # copies use SUPPRESS so they never clobber a value given up front.
    def add_globals(parser, suppress):
        def d(value):
            return argparse.SUPPRESS if suppress else value
        parser.add_argument("--config", type=Path, default=d(None), help="INI config file")
        parser.add_argument("--seed", type=int, default=d(None), help="override [experiment] seed")
        parser.add_argument("--out-dir", type=Path, default=d(Path("run")), help="run directory (default: run)")
        parser.add_argument("--force", action="store_true", default=d(False), help="recompute existing outputs")
        parser.add_argument("--quiet", action="store_true", default=d(False), help="only log warnings")

    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, suppress=True)
    p = argparse.ArgumentParser(prog="votedpo",
                                description="Majority-vote preference fine-tuning of a toy diffusion model.")
    add_globals(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="fit the base denoiser")
    sub.add_parser("gen-pairs", parents=[common], help="sample and score unlabeled pairs from the base model")
    for name, text in (("label", "label pairs for each mode"), ("train", "fine-tune one model per mode"),
                       ("evaluate", "best-of-N win rates against base and between modes")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--mode", type=_modes, default=None, help="comma list, e.g. balanced,single:metric_1")
    sp = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    sp.add_argument("--model", default="base", help="model name under models/, or 'base', or a checkpoint path")
    sp.add_argument("--condition", type=int, action="append", help="condition id (repeatable; default all)")
    sp.add_argument("-n", "--num", type=int, default=100, help="samples per condition")
    sp.add_argument("--output", type=Path, default=None, help="CSV path (default: stdout)")
    sub.add_parser("report", parents=[common], help="render win-rate tables and gnuplot data")
    sp = sub.add_parser("run", parents=[common], help="run several stages in order")
    sp.add_argument("--stages", type=_stages, default=STAGES, help=f"comma list from {','.join(STAGES)}")
    sp.add_argument("--mode", type=_modes, default=None, help="comma list of training modes")
    return p


def _load(args):
    path = args.config
    if path is None and (args.out_dir / "config.ini").exists():
        path = args.out_dir / "config.ini"
    return load_config(path, args.seed)


def _sample(args, cfg) -> None:
    run = Run(cfg, args.out_dir)
    if args.model == "base":
        ckpt = run.base_ckpt
    elif Path(args.model).suffix == ".ckpt":
        ckpt = Path(args.model)
    else:
        ckpt = run.model_ckpt(ModeSpec.parse(args.model.replace("-noref", "/noref")))
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    if args.num < 1:
        raise ValidationError("--num must be at least 1")
    params = load_checkpoint(ckpt)
    conds = args.condition if args.condition else list(range(params.arch.C))
    if any(not 0 <= c < params.arch.C for c in conds):
        raise ValidationError(f"condition ids must lie in [0, {params.arch.C})")
    cs = np.repeat(conds, args.num)
    rng = run.rng.split("sample", args.model)
    xs = sample_many(params, cfg.schedule, cs, [rng.split(int(c), j % args.num) for j, c in enumerate(cs)])
    buf = io.StringIO()
    buf.write(f"# {run.comment()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", *(f"x{i}" for i in range(xs.shape[1]))])
    for c, x in zip(cs, xs):
        w.writerow([int(c), *map(repr, x.tolist())])
    if args.output is None:
        sys.stdout.write(buf.getvalue())
    else:
        atomic_write_text(args.output, buf.getvalue())


def dispatch(args) -> None:
    cfg = _load(args)
    if args.command == "sample":
        _sample(args, cfg)
        return
    if args.command == "run":
        stages = args.stages
    else:
        stages = (args.command,)
    modes = getattr(args, "mode", None)
    run = run_pipeline(cfg, args.out_dir, stages, modes, args.force)
    if "report" in stages:
        for line in sorted(p.name for p in (run.root / "report").iterdir()):
            log.info("report: %s", line)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
