"""``mmdfw`` command line: run, eval and sample."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import ConfigError, load_config, load_section
from .io import FormatError, atomic_write, samples_text
from .runner import eval_mmd_curve, run_experiment, sample_reference

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write(out, text)


def _run(args):
    cfg = load_config(args.config)
    out = run_experiment(cfg)
    last = out.table.rows[-1] if out.table.rows else {}
    print(f"wrote {cfg.output_path('results')} ({len(out.table.rows)} rows, final mmd2 {last.get('mmd2')})",
          file=sys.stderr)


def _eval(args):
    spec, _ = load_section(args.kernel_config, "kernel")
    _emit(eval_mmd_curve(args.particles, args.reference, spec).to_csv(), args.output)


def _sample(args):
    target, base = load_section(args.target_config, "target")
    hmc, _ = load_section(args.hmc_config, "hmc")
    res = sample_reference(target, hmc, base)
    meta = {"source": "hmc", "acceptance_rate": res.acceptance_rate, "step_size": res.step_size}
    _emit(samples_text(res.samples, meta), args.output)
    print(f"acceptance rate {res.acceptance_rate:.3f}, step size {res.step_size}", file=sys.stderr)


def build_parser():
    p = argparse.ArgumentParser(prog="mmdfw", description="Frank-Wolfe MMD particle approximation of posteriors.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("config")
    r.set_defaults(func=_run)
    e = sub.add_parser("eval", help="mmd2 of every prefix of a particle file against a reference file")
    e.add_argument("particles")
    e.add_argument("reference")
    e.add_argument("kernel_config")
    e.add_argument("-o", "--output", help="write the table here instead of stdout")
    e.set_defaults(func=_eval)
    s = sub.add_parser("sample", help="draw HMC reference samples for a target")
    s.add_argument("target_config")
    s.add_argument("hmc_config")
    s.add_argument("-o", "--output", help="write the sample file here instead of stdout")
    s.set_defaults(func=_sample)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ArithmeticError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
