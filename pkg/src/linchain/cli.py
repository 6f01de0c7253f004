"""Command-line driver: ``linchain {gradcheck,paramcount,train,compare} --config FILE``.

Exit codes: 0 success, 1 domain failure (gradient check failed, training
diverged, a comparison cell crashed), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapters import AdaptedLinear, chain_param_count, init_adapter, param_count
from .checkpoint import save_checkpoint, save_merged
from .config import ConfigError, ExperimentConfig, load_config, serialize_config, with_overrides
from .gradients import LossSpec, grad_check
from .linalg import RngState, kaiming_uniform
from .training import compare_methods, make_task, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
OUTPUT_ENV = "LINCHAIN_OUTPUT_DIR"

log = logging.getLogger("linchain")


class RunDirError(RuntimeError):
    pass


def fmt(x) -> str:
    """Shortest decimal that parses back to the same float64."""
    if x is None:
        return ""
    return repr(float(x))


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir or os.environ.get(OUTPUT_ENV) or "runs")


def make_run_dir(root: Path, command: str, digest: str) -> Path:
    """``<root>/<command>-<digest>``, suffixed ``-2``, ``-3``... if taken."""
    root.mkdir(parents=True, exist_ok=True)
    base = root / f"{command}-{digest}"
    candidate, k = base, 1
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            k += 1
            candidate = base.with_name(f"{base.name}-{k}")


@contextmanager
def locked(run_dir: Path):
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunDirError(f"{run_dir} is in use by another process") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _random_case(adapter_cfg, seed: int, batch: int, loss_kind: str) -> tuple[AdaptedLinear, np.ndarray, LossSpec]:
    """Adapter with every trainable entry uniform on [-1, 1], plus a batch and target."""
    rng = RngState(seed)
    w0 = kaiming_uniform(adapter_cfg.d_in, adapter_cfg.d_out, rng)
    ad = init_adapter(replace(adapter_cfg, seed=seed), w0, rng)
    ad = ad.with_params({k: rng.uniform(p.size, -1.0, 1.0).reshape(p.shape) for k, p in ad.params().items()})
    x = rng.uniform(batch * adapter_cfg.d_in, -1.0, 1.0).reshape(batch, adapter_cfg.d_in)
    if loss_kind == "mse":
        target = rng.uniform(batch * adapter_cfg.d_out, -1.0, 1.0).reshape(batch, adapter_cfg.d_out)
    else:
        target = (rng.uniform(batch) * adapter_cfg.d_out).astype(np.int64)
    return ad, x, LossSpec(loss_kind, target)


def cmd_gradcheck(cfg: ExperimentConfig, run_dir: Path, quiet: bool) -> int:
    opts = cfg.gradcheck
    cases = []
    for adapter_cfg in cfg.adapters:
        for seed in cfg.seeds:
            for loss_kind in opts.losses:
                ad, x, loss = _random_case(adapter_cfg, seed, opts.batch_size, loss_kind)
                label = f"{adapter_cfg.label}/seed={seed}/{loss_kind}"
                report = grad_check(ad, x, loss, opts.tolerance,
                                    literal_eq11=opts.mutate_chain_gradient, label=label)
                cases.append(report.to_dict())
                if not quiet:
                    status = "PASS" if report.passed else "FAIL"
                    print(f"{status} {label} max_rel_err={report.max_error:.3e}")
    passed = all(c["passed"] for c in cases)
    summary = {
        "command": "gradcheck",
        "tolerance": opts.tolerance,
        "passed": passed,
        "max_relative_error": max(c["max_relative_error"] for c in cases),
        "mutated": opts.mutate_chain_gradient,
        "cases": cases,
    }
    _write_json(run_dir / "report.json", summary)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_paramcount(cfg: ExperimentConfig, run_dir: Path, quiet: bool) -> int:
    rows = []
    for a in cfg.adapters:
        total = param_count(a)
        chain = chain_param_count(a)
        rows.append({
            "label": a.label,
            "method": a.method,
            "d_in": a.d_in,
            "d_out": a.d_out,
            "chain_dims": list(a.chain_dims),
            "params": total,
            "chain_params": chain,
            "overhead_fraction": chain / total,
        })
    print(f"{'adapter':<24}{'d_in':>7}{'d_out':>7}  {'chain_dims':<18}{'params':>12}{'chain':>9}{'overhead':>10}")
    for r in rows:
        dims = ",".join(str(d) for d in r["chain_dims"])
        print(f"{r['label']:<24}{r['d_in']:>7}{r['d_out']:>7}  {dims:<18}{r['params']:>12}"
              f"{r['chain_params']:>9}{100 * r['overhead_fraction']:>9.2f}%")
    _write_json(run_dir / "report.json", {"command": "paramcount", "adapters": rows})
    return EXIT_OK


def trace_header(n_chain: int) -> list[str]:
    return (["epoch", "step", "train_loss", "eval_loss", "grad_norm_A", "grad_norm_B"]
            + [f"grad_norm_W{i}" for i in range(1, n_chain + 1)] + ["wall_time_s"])


def write_trace(path: Path, records, n_chain: int) -> None:
    groups = ["A", "B"] + [f"W{i}" for i in range(1, n_chain + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(n_chain))
        for r in records:
            norms = [fmt(r.grad_norm_per_group.get(g, math.nan)) for g in groups]
            w.writerow([r.epoch, r.step, fmt(r.train_loss), fmt(r.eval_loss), *norms, fmt(r.wall_time_s)])


def cmd_train(cfg: ExperimentConfig, run_dir: Path, quiet: bool) -> int:
    if len(cfg.adapters) != 1:
        raise ConfigError(f"train takes exactly one adapter, config has {len(cfg.adapters)}")
    seed = cfg.seeds[0]
    adapter_cfg = replace(cfg.adapters[0], seed=seed)
    if (adapter_cfg.d_in, adapter_cfg.d_out) != (cfg.task.d_in, cfg.task.d_out):
        raise ConfigError("adapter and task dimensions differ")
    data = make_task(cfg.task)
    ad = init_adapter(adapter_cfg, data.w0)
    records = train(ad, data, cfg.optimizer, seed)
    write_trace(run_dir / "trace.csv", records, adapter_cfg.n_chain)
    save_checkpoint(ad, run_dir / "checkpoint.bin")
    with np.errstate(over="ignore", invalid="ignore"):  # diverged weights may be non-finite
        save_merged(ad, run_dir / "merged.bin")
    last = records[-1]
    _write_json(run_dir / "report.json", {
        "command": "train",
        "label": adapter_cfg.label,
        "seed": seed,
        "epochs_run": last.epoch,
        "steps": last.step,
        "final_train_loss": last.train_loss,
        "final_eval_loss": last.eval_loss,
        "diverged": last.diverged,
    })
    if not quiet:
        print(f"{adapter_cfg.label}: epoch {last.epoch} train_loss={last.train_loss:.6g} eval_loss={last.eval_loss:.6g}")
    if last.diverged:
        print(f"training diverged at epoch {last.epoch}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, run_dir: Path, quiet: bool) -> int:
    if len(cfg.adapters) < 2:
        raise ConfigError("compare needs at least two adapters")
    report = compare_methods(list(cfg.adapters), cfg.task, cfg.optimizer, list(cfg.seeds),
                             threshold=cfg.compare.threshold, workers=cfg.compare.workers)
    with open(run_dir / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "method", "seed", "final_eval_loss", "auc", "epochs_to_threshold", "diverged", "error"])
        for c in report.cells:
            ett = "" if c.epochs_to_threshold is None else c.epochs_to_threshold
            w.writerow([c.index, c.label, c.method, c.seed, fmt(c.final_eval_loss), fmt(c.auc), ett, int(c.diverged), c.error])
    _write_json(run_dir / "report.json", {"command": "compare", **report.to_dict()})
    if not quiet:
        for agg in report.aggregates:
            print(f"{agg['label']:<20} auc={agg['auc_mean']:.6g}±{agg['auc_sd']:.3g} "
                  f"final={agg['final_eval_loss_mean']:.6g}±{agg['final_eval_loss_sd']:.3g}")
    return EXIT_FAIL if any(c.error for c in report.cells) else EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "paramcount": cmd_paramcount,
    "train": cmd_train,
    "compare": cmd_compare,
}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="linchain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--output-dir", help=f"output root (default: config, then ${OUTPUT_ENV}, then ./runs)")
        p.add_argument("--seed", type=int, help="replace the config's seeds with this one")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = with_overrides(load_config(args.config), seed=args.seed, output_dir=args.output_dir)
        run_dir = make_run_dir(output_root(cfg), args.command, cfg.digest(args.command))
        with locked(run_dir):
            (run_dir / "config.yaml").write_text(serialize_config(cfg))
            code = COMMANDS[args.command](cfg, run_dir, args.quiet)
    except ConfigError as exc:
        print(f"linchain: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RunDirError) as exc:
        print(f"linchain: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not args.quiet:
        print(f"results in {run_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
