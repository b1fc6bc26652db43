"""
Command-line entry point.

    python -m harness run-vortex --lattice-n 32 --steps 20
    python -m harness compare --config run.cfg --target-t-over-T 1.0

Every RunConfig field is a kebab-case flag; ``--config`` reads a plain
key=value file. Exit codes: 0 success, 1 run failure, 2 invalid
configuration, 3 spectra outside the acceptance band.
"""

import argparse
import sys
from dataclasses import fields

from fmm.constants import ExitCodes
from fmm.errors import AcceptanceBandError, ConfigValidationError, VortexFmmError
from harness import runs
from harness.config import RunConfig
from utils.logger import get_logger

VERBS = {
    "run-vortex": "vortex particle run with the distributed FMM",
    "run-spectral": "pseudo-spectral reference run",
    "compare": "both solvers from one initial field, spectra compared",
    "weak-scaling": "fixed particles per rank over a list of rank counts",
    "fmm-bench": "FMM accuracy and time against direct summation over p",
    "partition-test": "multisection against Morton partitioning",
}


def _flag_type(default):
    if isinstance(default, bool):
        return str
    if isinstance(default, tuple):
        return str
    return type(default)


def build_parser():
    parser = argparse.ArgumentParser(prog="vortex-fmm", description="Vortex particle FMM and spectral reference runs")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, help_text in VERBS.items():
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("--config", dest="config_file", default=None, help="key=value config file")
        group = p.add_argument_group("run configuration")
        for f in fields(RunConfig):
            group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=_flag_type(f.default),
                               default=None, help=f"(default {f.default})")
        if verb == "run-vortex":
            p.add_argument("--sharpen", action="store_true", help="solve initial strengths by RBF collocation")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logger = get_logger()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}

    try:
        config = RunConfig.load(args.config_file, overrides)
        logger.info(f"{args.verb}: config {config.config_hash()}")
        if args.verb == "run-vortex":
            run = runs.run_vortex(config, sharpen=args.sharpen)
            print(f"t={run.time:.6f} snapshots={len(run.snapshots)} report={run.report_path}")
        elif args.verb == "run-spectral":
            run = runs.run_spectral(config)
            print(f"t={run.field.time:.6f} spectra={len(run.spectra)}")
        elif args.verb == "compare":
            result = runs.run_compare(config)
            print(f"t/T={result.t_over_T:.3f} max|log10 ratio|={result.max_log_ratio:.3f} "
                  f"energy diff={result.energy_rel_diff:.3%} csv={result.csv_path}")
        elif args.verb == "weak-scaling":
            for row in runs.run_weak_scaling(config):
                print(f"P={row.ranks} N={row.particles} wall={row.wall_time:.3f}s efficiency={row.efficiency:.3f}")
        elif args.verb == "fmm-bench":
            for row in runs.fmm_bench(config):
                print(f"p={row.p} error={row.rel_l2_error:.3e} time={row.seconds:.3f}s")
        elif args.verb == "partition-test":
            for summary in runs.partition_test(config):
                print(f"{summary.method}: counts={summary.counts} overlap={summary.overlap_volume:.3e}")
    except ConfigValidationError as e:
        logger.error(f"invalid configuration: {e}")
        return ExitCodes.VALIDATION
    except AcceptanceBandError as e:
        logger.error(f"acceptance band violated: {e}")
        return ExitCodes.ACCEPTANCE_BAND
    except VortexFmmError as e:
        logger.error(f"{args.verb} failed", exception=e)
        return ExitCodes.FAILURE
    return ExitCodes.SUCCESS


if __name__ == "__main__":
    sys.exit(main())
