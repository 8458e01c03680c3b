"""Command-line front end.

    qdiff validate CONFIG
    qdiff run CONFIG [--seed N] [--workers N] [--bit-exact | --no-bit-exact]
    qdiff compare CONFIG [...]

Exit codes: 0 success, 2 unparsable config, 3 invalid config, 4 some
trajectory failed (artifacts are still written), 5 I/O failure.
``QDIFF_OUT`` overrides the output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
import tempfile

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    ConfigParseError,
    RunConfig,
    load_config,
    with_overrides,
)
from .ensemble import EnsembleResult, compare_results, compare_with_reference, run_ensemble
from .experiments import LindbladMode, check_martingale, fit_decoherence_rate, weighted_mean_se

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_CONFIG = 3
EXIT_TRAJECTORY = 4
EXIT_IO = 5


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- file output -----------------------------------------------------------------

def _clean(obj):
    """Make ``obj`` strict-JSON: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def atomic_write(path: str, text: str) -> None:
    """Write via a temporary file in the same directory and rename it into place."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _prepare_output(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
        fd, probe = tempfile.mkstemp(prefix=".probe-", dir=path)
        os.close(fd)
        os.unlink(probe)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"output directory {path!r} is not writable: {exc}") from None
    return path


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


# -- analysis of one ensemble ---------------------------------------------------------

def _expected_rate(cfg: RunConfig, pair) -> float:
    spec = cfg.spec
    if spec.lindblad_mode is LindbladMode.PROJECTORS:
        return 2.0
    lv = spec.eigenvalues
    return (lv[pair[0]] - lv[pair[1]]) ** 2


def _decoherence_pair(cfg: RunConfig):
    if cfg.decoherence is not None:
        return cfg.decoherence
    if abs(cfg.spec.initial_state[0, 1]) > 0.05:
        return (0, 1)
    return None


def analyse(cfg: RunConfig, res: EnsembleResult) -> dict:
    spec = res.spec
    weights = res.sample_weights()
    out = {"engine": spec.engine.value, "trajectories": spec.trajectories}
    try:
        out["born"] = res.born().to_dict()
    except ValueError as exc:
        out["born"] = {"error": str(exc)}
    pair = _decoherence_pair(cfg)
    out["fitted_rate"] = None
    out["decoherence"] = None
    if pair is not None:
        try:
            fit = fit_decoherence_rate(res.times, res.rho[:, :, pair[0], pair[1]], weights)
            out["fitted_rate"] = fit.rate
            out["decoherence"] = {**fit.to_dict(), "pair": list(pair), "expected": _expected_rate(cfg, pair)}
        except ValueError as exc:
            out["decoherence"] = {"error": str(exc), "pair": list(pair)}
    try:
        out["martingale"] = check_martingale(res.times, res.diagonals, spec.initial_state, weights).to_dict()
    except ValueError as exc:
        out["martingale"] = {"error": str(exc)}
    out["weights"] = res.weight_stats.to_dict() if res.weight_stats is not None else None
    out["mean_state_vs_reference"] = compare_with_reference(res).to_dict()
    failed = [f for f in res.failures if f[1] == "failed"]
    dead = [f for f in res.failures if f[1] == "dead"]
    out["failures"] = {"failed": len(failed), "dead": len(dead),
                       "first": [{"trajectory": i, "status": s, "message": m} for i, s, m in res.failures[:10]]}
    return out


def series_rows(cfg: RunConfig, results: dict) -> str:
    """CSV text: ``t`` then ``obs, obs_se`` per tracked selector (per engine if several)."""
    prefix = len(results) > 1
    header = ["t"]
    cols = []
    for name, res in results.items():
        w = res.sample_weights()
        for sel in cfg.tracked:
            vals = sel.evaluate(res.rho, res.weight, res.spec.eigenvalues)
            mean, se = weighted_mean_se(vals, None if sel.is_weight else w)
            label = f"{name}:{sel.name}" if prefix else sel.name
            header += [label, f"{label}_se"]
            cols += [mean, se]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    times = next(iter(results.values())).times
    for g, t in enumerate(times):
        wr.writerow([_fmt(t)] + [_fmt(c[g]) for c in cols])
    return buf.getvalue()


# -- commands ---------------------------------------------------------------------

def _load(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot read {args.config}: {exc.strerror or exc}") from None
    except ConfigParseError as exc:
        raise _Fail(EXIT_PARSE, f"parse error: {exc}") from None
    except ConfigError as exc:
        raise _Fail(EXIT_CONFIG, f"invalid config: {exc}") from None
    try:
        return with_overrides(cfg, seed=getattr(args, "seed", None), workers=getattr(args, "workers", None),
                              bit_exact=getattr(args, "bit_exact", None), output_dir=os.environ.get("QDIFF_OUT"))
    except ConfigError as exc:
        raise _Fail(EXIT_CONFIG, f"invalid override: {exc}") from None


def cmd_validate(args) -> int:
    cfg = _load(args)
    sys.stdout.write(dumps(cfg.normalized))
    return EXIT_OK


def _manifest(cfg: RunConfig, command: str, files: dict) -> dict:
    return {
        "command": command,
        "config": cfg.normalized,
        "config_hash": cfg.config_hash(),
        "seed": cfg.spec.seed,
        "bit_exact": cfg.bit_exact,
        "workers": cfg.workers,
        "engines": [e.value for e in cfg.engines],
        "files": {k: hashlib.sha256(v.encode()).hexdigest() for k, v in files.items()},
        "versions": {"qdiff": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "noise": "Philox4x64, key (seed, trajectory index), Box-Muller",
    }


def _run_all(cfg: RunConfig, quiet: bool) -> dict:
    results = {}
    for k, e in enumerate(cfg.engines):
        # an engine listed twice (a self-comparison) gets a numbered label
        label = e.value if cfg.engines.index(e) == k else f"{e.value}#{k + 1}"
        if not quiet:
            print(f"[qdiff] {label}: {cfg.spec.trajectories} trajectories", file=sys.stderr)
        results[label] = run_ensemble(cfg.spec.replace(engine=e), cfg.workers, cfg.bit_exact)
    return results


def _write(outdir: str, files: dict) -> None:
    try:
        for name, text in files.items():
            atomic_write(os.path.join(outdir, name), text)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"writing output failed: {exc}") from None


def _any_failed(results: dict) -> bool:
    return any(f[1] == "failed" for r in results.values() for f in r.failures)


def cmd_run(args) -> int:
    cfg = _load(args)
    outdir = _prepare_output(cfg.output_dir)
    results = _run_all(cfg, args.quiet)
    sections = {k: analyse(cfg, r) for k, r in results.items()}
    first = next(iter(sections.values()))
    summary = {
        "schema": 1,
        "config_hash": cfg.config_hash(),
        "seed": cfg.spec.seed,
        "engines": sections,
        # headline numbers of the first engine
        "born": first["born"],
        "fitted_rate": first["fitted_rate"],
        "martingale": first["martingale"],
        "weights": first["weights"],
    }
    if len(results) > 1:
        cmp = compare_results(results)
        summary["pairwise_z"] = {k: [float(x) for x in v] for k, v in cmp.pairwise_z.items()}
        summary["pairwise_z_with_unresolved"] = {k: [float(x) for x in v] for k, v in cmp.pairwise_z_all.items()}
        summary["max_abs_pairwise_z"] = cmp.max_abs_z
    files = {}
    if "json" in cfg.formats:
        files["summary.json"] = dumps(summary)
    if "csv" in cfg.formats:
        files["series.csv"] = series_rows(cfg, results)
    files["manifest.json"] = dumps(_manifest(cfg, "run", files))
    _write(outdir, files)
    if not args.quiet:
        b = first["born"]
        if "frequencies" in b:
            print("born frequencies: " + ", ".join(f"{f:.4f}" for f in b["frequencies"]), file=sys.stderr)
        print(f"[qdiff] wrote {', '.join(files)} to {outdir}", file=sys.stderr)
    if _any_failed(results):
        print("[qdiff] some trajectories failed; see summary.json", file=sys.stderr)
        return EXIT_TRAJECTORY
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    if len(cfg.engines) < 2:
        raise _Fail(EXIT_CONFIG, "invalid config: engines: compare needs at least two engines")
    outdir = _prepare_output(cfg.output_dir)
    results = _run_all(cfg, args.quiet)
    cmp = compare_results(results)
    report = {"schema": 1, "config_hash": cfg.config_hash(), "seed": cfg.spec.seed, **cmp.to_dict()}
    files = {"comparison.json": dumps(report)}
    if "csv" in cfg.formats:
        files["series.csv"] = series_rows(cfg, results)
    files["manifest.json"] = dumps(_manifest(cfg, "compare", files))
    _write(outdir, files)
    for k, z in cmp.pairwise_z.items():
        print(f"{k}: born z = " + ", ".join(f"{x:+.2f}" for x in z))
    for k, d in cmp.mean_distance.items():
        print(f"{k}: mean-state deviation / allowance = {d.max_ratio:.3f}")
    for k, p in cmp.pathwise.items():
        print(f"{k}: pathwise max distance = {p['max']:.3g}")
    if _any_failed(results):
        return EXIT_TRAJECTORY
    return EXIT_OK


def _workers(text: str):
    if text.upper() == "AUTO":
        return "AUTO"
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a positive integer or AUTO") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer or AUTO")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a non-negative integer") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qdiff", description="Quantum state diffusion experiments.")
    parser.add_argument("--version", action="version", version=f"qdiff {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="path to a JSON run config")
    runner = argparse.ArgumentParser(add_help=False)
    runner.add_argument("--seed", type=_seed, default=None, help="override the config seed")
    runner.add_argument("--workers", type=_workers, default=None, help="worker processes (integer or AUTO)")
    runner.add_argument("--bit-exact", action=argparse.BooleanOptionalAction, default=None,
                        help="fixed batch partition; identical output at any worker count")
    runner.add_argument("-q", "--quiet", action="store_true", help="no progress messages")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("validate", parents=[common], help="check a config and print it with defaults")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("run", parents=[common, runner], help="run the configured experiment")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", parents=[common, runner], help="compare two or more engines")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"qdiff: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
