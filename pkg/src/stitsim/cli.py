"""Command-line entry point: ``stitsim <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 comparison failure.  Worker processes for replications are taken from the
``STIT_WORKERS`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import analytic
from .directional import DirectionalModel, ModelError
from .engine import EventCapExceeded, nest, simulate
from .harness import ExperimentConfig, replicate, run_experiment
from .serialize import (SchemaError, event_log_jsonl, load_result, result_to_json,
                        segments_csv, to_obj, to_ply, write_files)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_COMPARE = 0, 1, 2, 3

SIM_KEYS = {"max_events", "checkpoint_every", "nest"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration

def load_config(path: str | None) -> dict:
    """Read and validate a JSON config file (unknown keys are rejected)."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("config file must contain a JSON object")
    allowed = {f for f in ExperimentConfig.__dataclass_fields__} | SIM_KEYS
    extra = set(cfg) - allowed
    if extra:
        raise UsageError(f"unknown config keys: {sorted(extra)}")
    return cfg


def _model(cfg: dict) -> DirectionalModel:
    try:
        return DirectionalModel.from_dict(cfg.get("model", {"type": "isotropic"}))
    except ModelError as exc:
        raise UsageError(f"invalid model: {exc}")


def _experiment(cfg: dict, args) -> ExperimentConfig:
    d = {k: v for k, v in cfg.items() if k not in SIM_KEYS}
    for key in ("t", "replications"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    d["seed"] = args.seed
    try:
        return ExperimentConfig.from_dict(d)
    except (ValueError, TypeError, ModelError) as exc:
        raise UsageError(f"invalid configuration: {exc}")


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    cfg.setdefault("replications", 1)   # registries of a single tessellation by default
    cfg.setdefault("margin", 0.0)       # only used by comparisons
    exp = _experiment(cfg, args)
    window = tuple(np.asarray(v, float) for v in exp.window)
    kw = {"method": exp.method, "max_events": int(cfg.get("max_events", 10_000_000)),
          "checkpoint_every": int(cfg.get("checkpoint_every", 0))}
    s_nest = cfg.get("nest") if args.nest is None else args.nest
    if s_nest is not None and not 0 < float(s_nest) < exp.t:
        raise UsageError("nest time must lie in (0, t)")
    if s_nest is not None:
        kw.update(kind="nest", s=float(s_nest))
    results = replicate(window, exp.t, exp.model, exp.seed, exp.replications, **kw)
    files = {}
    summaries = []
    for i, r in enumerate(results):
        prefix = "" if len(results) == 1 else f"rep{i:04d}_"
        files[prefix + "result.json"] = result_to_json(r)
        files[prefix + "segments.csv"] = segments_csv(r)
        files[prefix + "events.jsonl"] = event_log_jsonl(r)
        summaries.append(r.summary())
    summary = {"config": exp.to_dict(), "replications": summaries}
    if s_nest is not None:
        summary["nest"] = float(s_nest)
    files["summary.json"] = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    write_files(args.out, files)
    for i, s in enumerate(summaries):
        print(f"replication {i}: {s['n_events']} splits, {s['n_segments_inner']} inner "
              f"segments, S_V = {s['S_V']:.4f}, L_V = {s['L_V']:.4f}")
    return EXIT_OK


def _write_or_print(text: str, out: str | None):
    if out:
        write_files(Path(out).parent or ".", {Path(out).name: text})
    else:
        sys.stdout.write(text)


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _int_list(text: str) -> list[int]:
    """``"3"``, ``"0,1,5"`` or ``"0-10"``."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                a, b = part.split("-")
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"bad count list {text!r}") from None
    if any(v < 0 for v in out):
        raise UsageError("counts must be non-negative")
    return out


def cmd_analytic(args) -> int:
    if args.what == "table":
        rows = analytic.pn_table(args.tol)
        text = _csv([[r["n"], repr(r["exact"]), repr(r["quadrature"]), repr(r["difference"])]
                     for r in rows], ["n", "exact", "quadrature", "difference"])
    elif args.what == "pn":
        ns = _int_list(args.n or "0-10")
        vals = analytic.eval_pn(np.array(ns), args.tol)
        text = _csv([[n, repr(float(v))] for n, v in zip(ns, vals)], ["n", "p_n"])
    elif args.what == "pmn":
        ms, ns = _int_list(args.m or "0"), _int_list(args.n or "0")
        mm, nn = np.meshgrid(ms, ns, indexing="ij")
        vals = analytic.eval_pmn(mm.ravel(), nn.ravel(), args.tol)
        text = _csv([[m, n, repr(float(v))] for m, n, v in zip(mm.ravel(), nn.ravel(), vals)],
                    ["m", "n", "p_mn"])
    elif args.what == "moments":
        vm = analytic.vertex_moments()
        text = json.dumps(vm, indent=2) + "\n"
    else:  # densities
        if args.t is None or args.t <= 0:
            raise UsageError("densities need --t > 0")
        model = _model(load_config(args.config))
        ctx = analytic.AnalyticContext(args.t, model)
        ll, bl = analytic.length_laws(ctx), analytic.birth_laws(ctx)
        k = args.points
        x = np.linspace(0, 8 * ll.mean(), k + 1)[1:]
        s = np.linspace(0, args.t, k + 1)[1:] - args.t / (2 * k)
        rows = zip(x, ll.density(x), ll.cdf(x), s, bl.p_beta(s), bl.p_carrier(s))
        text = _csv([[repr(float(v)) for v in r] for r in rows],
                    ["x", "length_density", "length_cdf", "s", "birth_density",
                     "carrier_birth_density"])
    _write_or_print(text, args.out)
    return EXIT_OK


def cmd_sample_marks(args) -> int:
    cfg = load_config(args.config)
    t = args.t if args.t is not None else cfg.get("t")
    if t is None or t <= 0:
        raise UsageError("sample-marks needs --t > 0 (or t in the config)")
    if args.count < 1:
        raise UsageError("--count must be positive")
    ctx = analytic.AnalyticContext(float(t), _model(cfg))
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    sampler = analytic.sample_weighted_marks if args.weighted else analytic.sample_typical_marks
    s = sampler(ctx, rng, args.count)
    rows = ([repr(float(s.length[i])), *(repr(float(v)) for v in s.direction[i]),
             repr(float(s.birth[i])), repr(float(s.carrier_birth[i])),
             int(s.n_T[i]), int(s.n_X[i]), int(s.n_X_birth[i])] for i in range(len(s)))
    text = _csv(rows, ["length", "dir_x", "dir_y", "dir_z", "birth", "carrier_birth",
                       "n_T", "n_X", "n_X_birth"])
    _write_or_print(text, args.out)
    return EXIT_OK


def _load_results(in_dir: str):
    d = Path(in_dir)
    if not d.is_dir():
        raise UsageError(f"input directory not found: {in_dir}")
    paths = sorted(d.glob("rep*_result.json")) or sorted(d.glob("result.json"))
    if not paths:
        raise UsageError(f"no result.json in {in_dir}")
    try:
        return [load_result(p) for p in paths], paths
    except (SchemaError, json.JSONDecodeError) as exc:
        raise UsageError(str(exc))


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    results = None
    if args.input:
        results, _ = _load_results(args.input)
        r0 = results[0]
        cfg.setdefault("window", [r0.window[0].tolist(), r0.window[1].tolist()])
        cfg.setdefault("t", r0.time)
        cfg.setdefault("model", r0.model.to_dict())
        cfg["replications"] = len(results)
    exp = _experiment(cfg, args)
    report = run_experiment(exp, out_dir=args.out, results=results)
    print(report.to_table())
    if report.failure:
        return EXIT_RUNTIME
    return EXIT_OK if report.passed else EXIT_COMPARE


def cmd_export(args) -> int:
    results, paths = _load_results(args.input)
    files = {}
    for r, p in zip(results, paths):
        stem = p.name[: -len("result.json")] + "polygons"
        text = to_obj(r, args.fragments) if args.format == "obj" else to_ply(r, args.fragments)
        files[f"{stem}.{args.format}"] = text
    write_files(args.out or args.input, files)
    for name in files:
        print(name)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stitsim", description="Simulate 3D STIT tessellations and "
                "check them against closed-form I-segment statistics.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate tessellations and write registries")
    s.add_argument("--config", help="JSON config (window, t, model, replications, method, ...)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--t", type=float, help="construction time (overrides the config)")
    s.add_argument("--replications", type=int)
    s.add_argument("--nest", type=float, help="iterate: Y(s) then Y(t-s) in every cell")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analytic", help="closed forms and quadratures")
    a.add_argument("what", choices=["table", "pn", "pmn", "densities", "moments"])
    a.add_argument("--n", help="count(s): N, N1,N2 or N1-N2")
    a.add_argument("--m", help="T-count(s) for pmn")
    a.add_argument("--t", type=float, help="construction time for densities")
    a.add_argument("--config", help="JSON config supplying the model for densities")
    a.add_argument("--points", type=int, default=200)
    a.add_argument("--tol", type=float, default=1e-10, help="quadrature tolerance")
    a.add_argument("--out", help="write CSV here instead of stdout")
    a.set_defaults(func=cmd_analytic)

    m = sub.add_parser("sample-marks", help="draw oracle marks and vertex counts")
    m.add_argument("--count", type=int, required=True)
    m.add_argument("--t", type=float)
    m.add_argument("--config")
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("--weighted", action="store_true", help="length-weighted law")
    m.add_argument("--out")
    m.set_defaults(func=cmd_sample_marks)

    c = sub.add_parser("compare", help="simulation vs theory report")
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--in", dest="input", help="reuse the results of a simulate run")
    c.add_argument("--t", type=float)
    c.add_argument("--replications", type=int)
    c.set_defaults(func=cmd_compare)

    e = sub.add_parser("export", help="export I-polygons as OBJ or PLY")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--format", choices=["obj", "ply"], required=True)
    e.add_argument("--out", help="output directory (default: the input directory)")
    e.add_argument("--fragments", action="store_true",
                   help="export the pieces of each polygon in the final cells")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EventCapExceeded, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
