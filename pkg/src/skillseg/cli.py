"""Command-line entry point: one subcommand per pipeline stage plus `run` and `plots`."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, dump_config, load_config
from .exceptions import ConfigurationError, DependencyError, SkillSegError, StageError, UsageError
from .pipeline import STAGES, Run, read_report, read_rollouts, rollout_summary, run_pipeline, run_stage

EXIT_OK = 0
EXIT_USAGE = 2        # bad flags or invalid config
EXIT_DEPENDENCY = 3   # missing or mismatched upstream artifacts
EXIT_PLOTS = 70
EXIT_INTERNAL = 1

STAGE_COMMANDS = list(STAGES)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config; every field must be present")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=Path("skillseg-run"), help="artifact directory")
    common.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="skillseg", description="Skill segmentation and hierarchical policy pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run every stage in order")
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("plots", parents=[common], help="write SVG figures from a completed run")
    sub.add_parser("report", parents=[common], help="print the evaluation report")
    sub.add_parser("default-config", help="print the default config as YAML")
    return p


def resolve_config(args) -> PipelineConfig:
    """--config wins; otherwise the config saved in --out; otherwise defaults."""
    saved = args.out / "config.yaml"
    if args.config is not None:
        config = load_config(args.config)
    elif saved.exists():
        config = load_config(saved)
    else:
        config = PipelineConfig()
    if args.seed is not None:
        config.seed = int(args.seed)
    return config.validate()


def print_rollouts(run: Run, stream=None):
    if not run.path("rollouts").exists():
        return
    stream = stream or sys.stdout
    summary = rollout_summary(read_rollouts(run))
    programs = sorted({p for progs in summary.values() for p in progs})
    print(f"{'method':<16}" + "".join(f"{p:>10}" for p in programs), file=stream)
    for method, progs in summary.items():
        print(f"{method:<16}" + "".join(f"{progs.get(p, float('nan')):>10.2f}" for p in programs), file=stream)


def _execute(args) -> int:
    if args.command == "default-config":
        sys.stdout.write(dump_config(PipelineConfig()))
        return EXIT_OK
    config = resolve_config(args)
    if args.command == "run":
        run_pipeline(config, args.out, force=args.force)
        sys.stdout.write(read_report(args.out))
        return EXIT_OK
    run = Run(config, args.out)
    if args.command == "report":
        sys.stdout.write(read_report(args.out))
        return EXIT_OK
    if args.command == "plots":
        from .plots import make_plots

        run.require(["report"], "plots")
        try:
            paths = make_plots(args.out)
        except DependencyError:
            raise
        except (OSError, ValueError, KeyError) as exc:
            raise StageError("plots", EXIT_PLOTS, exc) from exc
        for path in paths:
            print(path)
        return EXIT_OK
    run.out.mkdir(parents=True, exist_ok=True)
    saved = run.out / "config.yaml"
    if not saved.exists():
        saved.write_text(dump_config(config), encoding="utf-8")
    ran = run_stage(run, args.command, force=args.force)
    print(f"{args.command}: {'done' if ran else 'up to date'}")
    if args.command == "rollout":
        print_rollouts(run)
    elif args.command == "evaluate":
        sys.stdout.write(read_report(args.out))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _execute(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SkillSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
