"""Command-line experiment runner.

``mdlab generate``  write a config's synthetic dataset(s) as CSV + JSON sidecar
``mdlab train``     run one method for every seed; one directory per seed
``mdlab compare``   mean/std table over every run found under a directory
``mdlab boundary``  per-domain decision-boundary grids from a checkpoint

Result files are byte-deterministic.  Timestamps only go to ``mdlab.log``.
Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, method_slug
from .data import DomainDataset, model_view, read_dataset, write_dataset
from .dtrain import PipelineReport, run_method
from .errors import ConfigError, DataError, DimensionError, MDLError
from .metrics import boundary_grid

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
LOG_NAME = "mdlab.log"

log = logging.getLogger("mdlab")


def _write_text(path: Path, text: str) -> None:
    checkpoint.atomic_write_bytes(path, text.encode("utf-8"))


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _setup_log(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    handler = logging.FileHandler(out / LOG_NAME)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    log.propagate = False


def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise ConfigError("--seeds needs at least one nonnegative integer")
    return seeds


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output:
        p = Path(cfg.output)
        return p if p.is_absolute() else cfg.base_dir / p
    raise ConfigError("no output directory: pass --out or set 'output' in the config")


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if cfg.data is None:
        raise ConfigError("config points at an existing dataset; nothing to generate")
    out = _out_dir(args, cfg)
    _setup_log(out)
    seeds = _parse_seeds(args.seeds) or cfg.seeds
    if "seed" in cfg.data:
        targets = {cfg.data["seed"]: out / "data.csv"}
    else:
        targets = {s: out / f"data_seed{s}.csv" for s in seeds}
    for seed, path in targets.items():
        data = cfg.raw_dataset(seed)
        write_dataset(data, path)
        log.info("wrote %s (%d rows)", path, sum(data.counts))
        print(f"{path}: {sum(data.counts)} rows, domains {data.counts}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def report_files(report: PipelineReport) -> dict[str, bytes]:
    """Every file a finished run writes, keyed by file name."""
    files: dict[str, bytes] = {}
    for phase, model in report.checkpoints.items():
        meta = {"method": report.method, "seed": report.seed, "phase": phase}
        files[f"checkpoint_{phase}.bin"] = checkpoint.dumps(model, meta)
    files["curves.csv"] = _csv_text(
        ["phase", "step", "domain", "split", "accuracy_or_auc", "loss"], report.curve_rows()
    ).encode()
    rows = []
    for phase, rec in report.phase_metrics.items():
        for name, v in zip(report.domains, rec.per_domain):
            rows.append((phase, name, rec.kind, v))
        for agg in ("average", "worst", "best", "pooled"):
            v = getattr(rec, agg)
            if v is not None:
                rows.append((phase, agg, rec.kind, v))
    files["metrics.csv"] = _csv_text(["phase", "domain", "metric", "value"], rows).encode()
    files["report.json"] = _json_text(report.to_dict()).encode()
    return files


def run_seed(cfg_dict: dict, base_dir: str, run_dir: str, seed: int) -> str:
    """Train one seed and write its files; ``report.json`` goes last so it marks completion."""
    cfg = ExperimentConfig.from_dict(cfg_dict, base_dir)
    data = cfg.dataset(seed)
    spec = cfg.arch_spec(data)
    report = run_method(cfg.method, spec, data, cfg.phase_configs(), seed)
    files = report_files(report)
    out = Path(run_dir)
    for name in sorted(files, key=lambda n: n == "report.json"):
        checkpoint.atomic_write_bytes(out / name, files[name])
    return f"seed {seed}: final {report.final.kind} average {report.final.average:.4f}"


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seeds = _parse_seeds(args.seeds) or cfg.seeds
    out = _out_dir(args, cfg)
    _setup_log(out)
    method_dir = out / method_slug(cfg.method)
    recorded = seeds
    cfg_path = method_dir / "config.json"
    if cfg_path.exists():
        old = json.loads(cfg_path.read_text())
        if {**old, "seeds": None} != {**cfg.to_dict(), "seeds": None}:
            raise ConfigError(f"{method_dir} holds runs of a different config; use another --out")
        recorded = sorted(set(old["seeds"]) | set(seeds))
    _write_text(cfg_path, _json_text({**cfg.to_dict(), "seeds": recorded}))
    todo = []
    for s in seeds:
        run_dir = method_dir / f"seed_{s}"
        if (run_dir / "report.json").exists():
            log.info("%s seed %d already complete, skipping", cfg.method, s)
            print(f"seed {s}: already complete")
            continue
        todo.append((s, run_dir))
    base = str(cfg.base_dir)
    log.info("training %s on seeds %s", cfg.method, [s for s, _ in todo])
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(run_seed, cfg.to_dict(), base, str(d), s) for s, d in todo]
            for f in futures:
                msg = f.result()
                log.info(msg)
                print(msg)
    else:
        for s, d in todo:
            msg = run_seed(cfg.to_dict(), base, str(d), s)
            log.info(msg)
            print(msg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare

def _fmt_cell(values: list[float], kind: str) -> str:
    if not values:
        return "--"
    scale, digits = (100.0, 1) if kind == "accuracy" else (1.0, 4)
    mean = float(np.mean(values)) * scale
    if len(values) == 1:
        return f"{mean:.{digits}f}"
    std = float(np.std(values, ddof=1)) * scale
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def collect_runs(root: Path) -> list[dict]:
    """One entry per method directory: expected seeds, finished reports, missing seeds."""
    entries = []
    for cfg_path in sorted(root.glob("*/config.json")):
        cfg = json.loads(cfg_path.read_text())
        reports, missing = [], []
        for s in cfg["seeds"]:
            rp = cfg_path.parent / f"seed_{s}" / "report.json"
            if rp.exists():
                reports.append(json.loads(rp.read_text()))
            else:
                missing.append(s)
        entries.append({"method": cfg["method"], "seeds": cfg["seeds"], "reports": reports, "missing": missing})
    return entries


def comparison_table(entries: list[dict]) -> tuple[list[str], list[list], list[list[str]]]:
    """``(header, csv_rows, text_rows)``.

    Domain columns are the union of every run's domains in first-seen order;
    a method without a given domain gets an empty cell.
    """
    domains: list[str] = []
    for e in entries:
        for r in e["reports"]:
            domains += [d for d in r["domains"] if d not in domains]
    aggs = ["average", "worst", "pooled"]
    header = ["method", "metric", "seeds"] + domains + aggs + ["missing"]
    csv_rows, text_rows = [], []
    for e in entries:
        finals = [(r["domains"], r["final"]) for r in e["reports"]]
        kind = finals[0][1]["kind"] if finals else ""
        cols = [[f["per_domain"][names.index(d)] for names, f in finals if d in names] for d in domains]
        cols += [[f[a] for _, f in finals if f.get(a) is not None] for a in aggs]
        missing = ";".join(str(s) for s in e["missing"])
        row = [e["method"], kind, len(finals)]
        for vals in cols:
            row += [float(np.mean(vals)) if vals else "", float(np.std(vals, ddof=1)) if len(vals) > 1 else ""]
        csv_rows.append(row + [missing])
        text_rows.append(
            [e["method"], kind or "-", f"{len(finals)}/{len(e['seeds'])}"] + [_fmt_cell(v, kind) for v in cols] + [missing or "-"]
        )
    return header, csv_rows, text_rows


def aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    root = Path(args.dir or args.out or ".")
    entries = collect_runs(root)
    if not any(e["reports"] for e in entries):
        raise DataError(f"no completed runs under {root}")
    header, csv_rows, text_rows = comparison_table(entries)
    csv_header = header[:3]
    for col in header[3:-1]:
        csv_header += [f"{col}_mean", f"{col}_std"]
    csv_header.append("missing")
    out = Path(args.out) if args.out else root
    _write_text(out / "comparison.csv", _csv_text(csv_header, csv_rows))
    text = aligned(header, text_rows)
    _write_text(out / "comparison.txt", text)
    sys.stdout.write(text)
    for e in entries:
        if e["missing"]:
            print(f"missing runs: {e['method']} seeds {e['missing']}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# boundary

def _boundary_data(args) -> DomainDataset:
    if args.data:
        return model_view(read_dataset(args.data))
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        seeds = _parse_seeds(args.seeds) or cfg.seeds
        return cfg.dataset(seeds[0])
    raise ConfigError("boundary needs --data or --config to annotate the grids")


def cmd_boundary(args) -> int:
    if not args.checkpoint:
        raise ConfigError("boundary needs --checkpoint")
    try:
        model, _ = checkpoint.load(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint {args.checkpoint} not found") from None
    data = _boundary_data(args)
    if data.dim != 2 or model.spec.input_dim != 2:
        raise DataError("decision boundaries are only supported for 2-d inputs")
    if data.num_domains != model.spec.num_domains:
        raise DataError("dataset and checkpoint disagree on the number of domains")
    out = Path(args.out or ".")
    grid = boundary_grid(model, resolution=args.resolution, data=data)
    for t, name in enumerate(data.names):
        _write_text(out / f"grid_{name}.csv", grid.domain_csv(t))
    summary = {
        "resolution": grid.resolution,
        "extents": [float(grid.xs[0]), float(grid.xs[-1]), float(grid.ys[0]), float(grid.ys[-1])],
        "domains": list(data.names),
        "accuracy": grid.accuracy,
        "conflict_cells": grid.conflict_cells,
    }
    _write_text(out / "grid_summary.json", _json_text(summary))
    print(f"{len(data.names)} grids of {grid.resolution}x{grid.resolution}; conflict cells: {grid.conflict_cells}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdlab", description="Multi-domain learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seeds", help="comma-separated seeds overriding the config")
        sp.add_argument("--jobs", type=int, default=1, help="parallel seed replicates")

    common(sub.add_parser("generate", help="write synthetic datasets"))
    common(sub.add_parser("train", help="train a method over seeds"))
    cp = sub.add_parser("compare", help="tabulate finished runs")
    common(cp, config_required=False)
    cp.add_argument("dir", nargs="?", help="directory holding <method>/seed_<s>/report.json runs")
    bp = sub.add_parser("boundary", help="export decision-boundary grids")
    common(bp, config_required=False)
    bp.add_argument("--checkpoint", help="checkpoint_<phase>.bin file")
    bp.add_argument("--data", help="dataset CSV (with JSON sidecar)")
    bp.add_argument("--resolution", type=int, default=200)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "compare": cmd_compare, "boundary": cmd_boundary}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "boundary" and args.resolution < 1:
        print("error: --resolution must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MDLError, DimensionError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
