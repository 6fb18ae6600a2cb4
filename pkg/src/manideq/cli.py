"""``deq`` command line: fit, eval, sample and suite.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

import argparse
import json
import os
import sys

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, config_from_dict, parse_config
from .experiment import NumericalAbort, evaluate_model, run_experiment, trial_suite
from .metrics import MetricsError
from .objectives import marginal_log_density, sample_manifold
from .targets import make_target, rejection_sample, write_samples_csv, write_samples_jsonl
from .training import substream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _fail(code, kind, message, out=None):
    err = {"error": kind, "message": message, "exit_code": code}
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "error.json"), "w") as fh:
            json.dump(err, fh, indent=1)
    print(json.dumps(err), file=sys.stderr)
    return code


def _load_config(args):
    cfg = parse_config(args.config)
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    return config_from_dict(d)


def workers():
    try:
        return max(1, int(os.environ.get("DEQ_THREADS", "1")))
    except ValueError:
        return 1


def cmd_fit(args):
    cfg = _load_config(args)
    ev = run_experiment(cfg)
    print(json.dumps(ev.report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    from .config import MetricsConfig

    model, extra = load_checkpoint(args.checkpoint)
    target_name = args.target or extra.get("target")
    if target_name is None:
        raise ConfigError("/target", "no target given and none recorded in the checkpoint")
    target = make_target(target_name)
    if target.manifold != model.manifold:
        raise ConfigError("/target", f"checkpoint models {model.manifold}, target lives on {target.manifold}")
    mcfg = MetricsConfig(n=args.n or 10_000, n_moments=args.n_moments or 0, k_eval=args.k_eval)
    seed = args.seed or 0
    ev = evaluate_model(model, target, mcfg, seed)
    ev.report.check()
    doc = {"version": __version__, "target": target_name, "seed": seed,
           "checkpoint": os.path.abspath(args.checkpoint), **ev.report.to_dict()}
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps(ev.report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_sample(args):
    seed = args.seed or 0
    n = args.n or 1000
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    header = f"manideq {__version__} seed={seed}"
    if args.checkpoint:
        model, extra = load_checkpoint(args.checkpoint)
        pts = sample_manifold(model, n, substream(seed, "sample"))
        logq = marginal_log_density(model, pts, args.k_eval, substream(seed, "sample-density"))
        write_samples_csv(os.path.join(out, "samples_model.csv"), pts, header)
        write_samples_jsonl(os.path.join(out, "samples_model.jsonl"), pts, logq, header)
        return EXIT_OK
    if not args.target:
        raise ConfigError("/target", "sample needs --target or --checkpoint")
    target = make_target(args.target)
    res = rejection_sample(target, n, substream(seed, "sample"))
    write_samples_csv(os.path.join(out, "samples_target.csv"), res.points, header)
    write_samples_jsonl(os.path.join(out, "samples_target.jsonl"), res.points,
                        target.log_unnorm(res.points), header)
    print(json.dumps({"n": n, "acceptance_rate": res.acceptance_rate}))
    return EXIT_OK


def cmd_suite(args):
    cfg = _load_config(args)
    rows, _ = trial_suite(cfg, args.trials, cfg.out, workers=min(workers(), args.trials))
    print(json.dumps({k: list(v) for k, v in rows.items()}, ensure_ascii=False))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="deq", description="Manifold density estimation by dequantization.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("fit", help="sample the target, train, evaluate and write all outputs")
    common(sp)
    sp.set_defaults(fn=cmd_fit)

    sp = sub.add_parser("eval", help="evaluate a checkpoint against a target")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--target", default=None)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--n-moments", type=int, default=0)
    sp.add_argument("--k-eval", type=int, default=100)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sample", help="rejection-sample a target or sample a checkpoint")
    common(sp, config=False)
    sp.add_argument("--target", default=None)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--k-eval", type=int, default=100)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("suite", help="repeat a fit over several seeds and aggregate")
    common(sp)
    sp.add_argument("--trials", type=int, default=10)
    sp.set_defaults(fn=cmd_suite)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    out = getattr(args, "out", None)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError, KeyError) as exc:
        return _fail(EXIT_CONFIG, type(exc).__name__, str(exc), out)
    except (NumericalAbort, MetricsError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, type(exc).__name__, str(exc), out)


if __name__ == "__main__":
    sys.exit(main())
