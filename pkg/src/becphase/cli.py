"""Command-line entry point: ``becphase run|compare|derive|modes <config>``."""

import argparse
import json
import logging
import sys

from . import runner
from .errors import BecPhaseError, ConfigurationError

log = logging.getLogger("becphase")


def _parser():
    p = argparse.ArgumentParser(prog="becphase", description=__doc__)
    p.add_argument("command", choices=("run", "compare", "derive", "modes"))
    p.add_argument("config")
    p.add_argument("--trajectories", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output")
    p.add_argument("--deterministic-merge", nargs="?", const="on", choices=("on", "off"))
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load(args):
    cfg = runner.parse_config(args.config)
    merge = None if args.deterministic_merge is None else args.deterministic_merge == "on"
    return cfg.with_overrides(n_trajectories=args.trajectories, seed=args.seed,
                              workers=args.workers, output=args.output,
                              deterministic_merge=merge)


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        # argparse usage errors are configuration errors
        return ConfigurationError.exit_code if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    phase = "config"
    try:
        cfg = load(args)
        phase = args.command
        figures = not args.no_figures
        if args.command == "run":
            report, _, _ = runner.run_ensemble(cfg, with_figures=figures)
        elif args.command == "compare":
            report = runner.run_oracle_compare(cfg, with_figures=figures)
        elif args.command == "derive":
            path, payload = runner.run_derive(cfg)
            print(json.dumps({"derivation": path,
                              "factorization_residual": payload["factorization_residual"],
                              "truncated_terms": payload["truncation_report"]["count"]}))
            return 0
        else:
            files, setup = runner.run_modes(cfg, with_figures=figures)
            print(json.dumps({"files": files, "energies": setup.basis.energies.tolist()}))
            return 0
    except BecPhaseError as exc:
        print(f"error [{phase}]: {exc}", file=sys.stderr)
        return exc.exit_code
    summary = {"status": report.status, "output": cfg.output, "n_used": report.n_used,
               "diverged": report.diverged, "diverged_fraction": report.diverged_fraction}
    if report.comparison is not None:
        summary["comparison_pass"] = report.results.get("comparison_pass")
        summary["comparison_fraction"] = report.results.get("comparison_fraction")
    print(json.dumps(summary))
    if report.exit_code:
        print(f"error [{phase}]: {report.status}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
