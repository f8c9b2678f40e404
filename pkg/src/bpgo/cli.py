"""Command-line harness: ``bpgo run | sweep | compare | ablate | defaults``.

Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 non-finite loss.
The output root is ``output.directory`` unless ``BPGO_OUT`` is set.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence

from . import config as cfgmod
from .errors import ConfigError
from .trainer import ablation_suite, initial_policy, train, write_csv, _write_atomic

log = logging.getLogger("bpgo")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3


def output_root(cfg: dict) -> str:
    return os.environ.get("BPGO_OUT") or cfg["output"]["directory"]


def _new_run_dir(root: str, name: str) -> str:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = os.path.join(root, f"{stamp}-{name}")
    n = 1
    while os.path.exists(path):
        n += 1
        path = os.path.join(root, f"{stamp}-{name}-{n}")
    os.makedirs(path)
    return path


def _dump_json(path: str, obj) -> None:
    _write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def execute(cfg: dict, run_dir: str) -> int:
    """Train one resolved config into ``run_dir``; returns the exit code."""
    env, trainer = cfgmod.build(cfg)
    os.makedirs(run_dir, exist_ok=True)
    _dump_json(os.path.join(run_dir, "resolved-config.json"), cfg)
    policy = initial_policy(env, cfg["policy"]["init_scale"], trainer.seed)
    result = train(trainer, env, policy=policy, metrics_path=os.path.join(run_dir, "metrics.jsonl"))
    code = EXIT_NONFINITE if result.aborted else EXIT_OK
    summary = dict(result.summary(), exit_code=code)
    if result.aborted is not None:
        summary["error"] = str(result.aborted)
        summary["error_prompt_id"] = result.aborted.prompt_id
    _dump_json(os.path.join(run_dir, "summary.json"), summary)
    return code


def cmd_run(args) -> int:
    overrides = cfgmod.parse_overrides(args.set)
    cfg = cfgmod.load(args.config, overrides) if args.config else cfgmod.resolve(None, overrides)
    root = args.out or output_root(cfg)
    run_dir = _new_run_dir(root, cfg["output"]["name"])
    code = execute(cfg, run_dir)
    print(run_dir)
    if code == EXIT_NONFINITE:
        print(f"error: training aborted on a non-finite loss; see {run_dir}/summary.json", file=sys.stderr)
    return code


def _unique(seq) -> list:
    seen, out = set(), []
    for x in seq:
        key = json.dumps(x, sort_keys=True)
        if key not in seen:
            seen.add(key)
            out.append(x)
    return out


def _cell(job):
    cfg, run_dir = job
    if cfg is None:
        return EXIT_CONFIG, None
    try:
        code = execute(cfg, run_dir)
    except ConfigError as exc:
        log.error("%s: %s", run_dir, exc)
        return EXIT_CONFIG, None
    except OSError as exc:
        log.error("%s: %s", run_dir, exc)
        return EXIT_IO, None
    with open(os.path.join(run_dir, "summary.json"), encoding="utf-8") as fh:
        return code, json.load(fh)


def sweep_cells(cfg: dict) -> List[tuple]:
    """(value, seed, resolved cell config) for every distinct value x seed pair.

    A cell whose config does not validate carries ``None`` and is reported
    with exit code 2 instead of failing the whole sweep.
    """
    sweep = cfg["sweep"]
    param = sweep.get("parameter")
    values = _unique(sweep.get("values") or [])
    seeds = _unique(sweep.get("seeds") or [])
    if not param or not values or not seeds:
        raise ConfigError("sweep needs a parameter, a non-empty values list and a non-empty seeds list")
    cells = []
    for v in values:
        for s in seeds:
            try:
                cell = cfgmod.resolve(cfg, [(param, v), ("trainer.seed", s)])
            except ConfigError as exc:
                log.error("sweep cell %s=%r seed=%r: %s", param, v, s, exc)
                cell = None
            cells.append((v, s, cell))
    return cells


def cmd_sweep(args) -> int:
    overrides = cfgmod.parse_overrides(args.set)
    cfg = cfgmod.load(args.config, overrides)
    cells = sweep_cells(cfg)
    root = args.out or output_root(cfg)
    sweep_dir = _new_run_dir(root, f"sweep-{cfg['output']['name']}")
    _dump_json(os.path.join(sweep_dir, "resolved-config.json"), cfg)
    param = cfg["sweep"]["parameter"]
    jobs = []
    for i, (v, s, cell) in enumerate(cells):
        jobs.append((cell, os.path.join(sweep_dir, f"cell-{i:03d}-{param}={v}-seed={s}")))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            outcomes = list(pool.map(_cell, jobs))
    else:
        outcomes = [_cell(job) for job in jobs]
    rows = []
    for (v, s, _), (cell_cfg, run_dir), (code, summary) in zip(cells, jobs, outcomes):
        summary = summary or {}
        rows.append(
            {
                "parameter": param,
                "value": v,
                "seed": s,
                "exit_code": code,
                "final_true_quality": summary.get("final_true_quality"),
                "final_raw_reward": summary.get("final_raw_reward"),
                "auc": summary.get("auc"),
                "run_dir": os.path.basename(run_dir),
            }
        )
    write_csv(rows, os.path.join(sweep_dir, "aggregate.csv"))
    print(sweep_dir)
    return max(code for code, _ in outcomes)


def read_run(run_dir: str):
    """(summary dict, per-step expected-true-quality curve) of a finished run."""
    with open(os.path.join(run_dir, "summary.json"), encoding="utf-8") as fh:
        summary = json.load(fh)
    curve = []
    metrics = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(metrics):
        with open(metrics, encoding="utf-8") as fh:
            curve = [json.loads(line)["expected_true_quality"] for line in fh if line.strip()]
    return summary, curve


SUMMARY_FIELDS = ("initial_true_quality", "final_true_quality", "final_raw_reward", "auc", "steps")


def compare(run_dirs: Sequence[str]):
    """Side-by-side final metrics and step-aligned curves.

    Runs of unequal length are truncated to the shortest. Column names are
    the run directory basenames, de-duplicated with ``#n`` suffixes.
    """
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    names, loaded = [], []
    for d in run_dirs:
        if not os.path.exists(os.path.join(d, "summary.json")):
            raise ConfigError(f"missing summary.json in {d}")
        loaded.append(read_run(d))
        base = os.path.basename(os.path.normpath(d))
        name, n = base, 1
        while name in names:
            n += 1
            name = f"{base}#{n}"
        names.append(name)
    summary_rows = [
        {"metric": f, **{n: s.get(f) for n, (s, _) in zip(names, loaded)}} for f in SUMMARY_FIELDS
    ]
    length = min(len(c) for _, c in loaded)
    curve_rows = [{"step": i, **{n: c[i] for n, (_, c) in zip(names, loaded)}} for i in range(length)]
    return summary_rows, curve_rows


def _markdown(rows: List[dict]) -> str:
    if not rows:
        return "(empty)\n"
    cols = list(rows[0])
    fmt = lambda v: f"{v:.6g}" if isinstance(v, float) else str(v)
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(fmt(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _csv_text(rows: List[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def cmd_compare(args) -> int:
    summary_rows, curve_rows = compare(args.run_dirs)
    if args.out:
        if args.format == "csv":
            _write_atomic(args.out + "-summary.csv", _csv_text(summary_rows))
            _write_atomic(args.out + "-curves.csv", _csv_text(curve_rows))
        else:
            _write_atomic(args.out + ".md", _markdown(summary_rows) + "\n" + _markdown(curve_rows))
        return EXIT_OK
    render = _csv_text if args.format == "csv" else _markdown
    sys.stdout.write(render(summary_rows) + "\n" + render(curve_rows))
    return EXIT_OK


def cmd_ablate(args) -> int:
    overrides = cfgmod.parse_overrides(args.set)
    cfg = cfgmod.load(args.config, overrides) if args.config else cfgmod.resolve(None, overrides)
    env, trainer = cfgmod.build(cfg)
    policy = initial_policy(env, cfg["policy"]["init_scale"], trainer.seed)
    rows = ablation_suite(trainer, env, seeds=range(args.seeds), policy=policy)
    root = args.out or output_root(cfg)
    run_dir = _new_run_dir(root, f"ablation-{cfg['output']['name']}")
    _dump_json(os.path.join(run_dir, "resolved-config.json"), cfg)
    write_csv(rows, os.path.join(run_dir, "ablation.csv"))
    sys.stdout.write(_markdown(rows))
    print(run_dir)
    return EXIT_OK if all(math.isfinite(r["mean_auc"]) for r in rows) else EXIT_NONFINITE


def cmd_defaults(args) -> int:
    print(json.dumps(cfgmod.default_config(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpgo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("config", nargs="?", help="JSON config (defaults if omitted)")
    run.add_argument("-s", "--set", action="append", default=[], metavar="PATH=VALUE")
    run.add_argument("--out", help="output root (overrides BPGO_OUT and output.directory)")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="run the config's sweep section")
    sw.add_argument("config")
    sw.add_argument("-s", "--set", action="append", default=[], metavar="PATH=VALUE")
    sw.add_argument("--out")
    sw.add_argument("--workers", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)

    cmp_ = sub.add_parser("compare", help="tabulate two or more finished runs")
    cmp_.add_argument("run_dirs", nargs="+")
    cmp_.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    cmp_.add_argument("--out", help="file prefix; writes PREFIX-summary.csv and PREFIX-curves.csv (or PREFIX.md)")
    cmp_.set_defaults(func=cmd_compare)

    ab = sub.add_parser("ablate", help="GRPO / RAS / CRT / RAS+CRT and the alpha grid over seeds")
    ab.add_argument("config", nargs="?")
    ab.add_argument("-s", "--set", action="append", default=[], metavar="PATH=VALUE")
    ab.add_argument("--seeds", type=int, default=3)
    ab.add_argument("--out")
    ab.set_defaults(func=cmd_ablate)

    de = sub.add_parser("defaults", help="print the default config")
    de.set_defaults(func=cmd_defaults)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
