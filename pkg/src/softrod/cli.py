"""Command-line interface.

Subcommands: ``train``, ``exp1`` .. ``exp4``, ``bench``, ``identify``,
``tune-ukf``.  Each takes ``--config <path>`` (INI sections, see
:mod:`softrod.configio`), a mandatory ``--seed`` and ``--out <dir>``.
Exit code 0 on success; failures emit one JSON line per error on stderr and
exit nonzero.
"""

import argparse
import json
import os
import sys
import traceback

from . import experiments as xp
from .configio import ConfigError, load_config


def build_parser():
    p = argparse.ArgumentParser(
        prog="softrod",
        description="soft continuum rod control stack: training, "
                    "model-in-the-loop experiments and benchmarks")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("train", "train the surrogate on the physics residual"),
            ("exp1", "linear vs nonlinear model comparison"),
            ("exp2", "surrogate fidelity against the integrator"),
            ("exp3", "online bending-compliance estimation"),
            ("exp4", "closed-loop tracking and setpoint control"),
            ("bench", "prediction timing benchmark"),
            ("identify", "parameter identification on synthetic data"),
            ("tune-ukf", "swarm-tune the filter parameters")]:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--seed", type=int, required=True,
                        help="seed for all randomness (mandatory)")
        sp.add_argument("--out", default="out", help="output directory")
        if name == "identify":
            sp.add_argument("--quick", action="store_true",
                            help="reduced swarm budget")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config,
                          extra_sections={"experiment": xp.ExperimentConfig})
        exp_cfg = xp.ExperimentConfig(**cfg["experiment"])
        os.makedirs(args.out, exist_ok=True)
        if args.command == "train":
            summary = xp.run_training(cfg["rod"], cfg["training"], exp_cfg,
                                      args.out, args.seed)
        elif args.command == "exp1":
            summary = xp.run_exp1_linearization(cfg["rod"], exp_cfg, args.out,
                                                args.seed)
        elif args.command == "exp2":
            summary = xp.run_exp2_surrogate_fidelity(cfg["rod"], exp_cfg,
                                                     args.out, args.seed)
        elif args.command == "exp3":
            summary = xp.run_exp3_parameter_estimation(
                cfg["rod"], cfg["ukf"], exp_cfg, args.out, args.seed)
        elif args.command == "exp4":
            summary = xp.run_exp4_closed_loop(cfg["rod"], cfg["ukf"],
                                              cfg["nempc"], exp_cfg, args.out,
                                              args.seed)
        elif args.command == "bench":
            summary = xp.bench_timing(cfg["rod"], exp_cfg, args.out, args.seed)
        elif args.command == "identify":
            summary = xp.run_identification(cfg["rod"], exp_cfg, args.out,
                                            args.seed,
                                            quick=getattr(args, "quick", False))
        elif args.command == "tune-ukf":
            summary = xp.run_tune_ukf(cfg["rod"], cfg["ukf"], exp_cfg,
                                      args.out, args.seed)
        else:  # pragma: no cover
            raise ValueError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}),
              file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "trace": traceback.format_exc(limit=6)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "out": args.out,
                      "summary": summary}, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
