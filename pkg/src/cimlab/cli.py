"""Command-line entry point: ``cimlab <verb> [--config FILE] [--seed N] [--out DIR]``.

Each verb runs the matching pipeline for every configured seed, in worker
processes capped by ``LAB_THREADS``, and writes ``summary.json``,
``per_seed.csv`` and per-seed artifacts to the output directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__
from .config import TASKS, ConfigError, ExperimentConfig, from_dict, load_config
from .experiments import RunResult, input_hash, run

log = logging.getLogger("cimlab")

VERBS = TASKS + ("run", "report")
PARTIAL_MARKER = "PARTIAL"


def lab_threads(env=None) -> int:
    env = os.environ if env is None else env
    raw = env.get("LAB_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"LAB_THREADS must be a positive integer, got {raw!r}")
    return n


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _job(args: Tuple[dict, int]) -> RunResult:
    cfg_dict, seed = args
    return run(from_dict(cfg_dict), seed)


def _expand(cfg: ExperimentConfig) -> List[Tuple[str, ExperimentConfig, int]]:
    """(label, config, seed) jobs; sweeps get one label per value."""
    if cfg.task != "sweep":
        return [("", cfg, s) for s in cfg.seeds]
    jobs = []
    for value in cfg.sweep.values:
        sub = cfg.with_value("task", cfg.sweep.task).with_value(cfg.sweep.param, value)
        jobs += [(f"{cfg.sweep.param}={value}", sub, s) for s in cfg.seeds]
    return jobs


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def execute(cfg: ExperimentConfig, out: Path, threads: int = 1) -> Dict:
    """Run every job of ``cfg``, write outputs to ``out`` and return the summary."""
    start = time.perf_counter()
    jobs = _expand(cfg)
    results: List[Optional[RunResult]] = [None] * len(jobs)
    error = None
    payload = [(sub.to_dict(), seed) for _, sub, seed in jobs]
    try:
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
                for i, res in enumerate(pool.map(_job, payload)):
                    results[i] = res
        else:
            for i, p in enumerate(payload):
                results[i] = _job(p)
    except Exception as exc:  # keep whatever finished
        error = f"{type(exc).__name__}: {exc}"
        log.error("run failed: %s", error)

    rows = []
    for (label, _, seed), res in zip(jobs, results):
        if res is None:
            continue
        prefix = f"{label.replace('=', '_')}/" if label else ""
        paths = [f"{prefix}seed_{seed}/{name}" for name in sorted(res.artifacts)]
        for path in paths:
            _atomic_write(out / path, res.artifacts[path.rsplit("/", 1)[1]])
        # artifact paths let a row be replayed exactly, e.g. from its fault map
        rows.append({"point": label, "seed": seed, **{k: _clean(v) for k, v in res.metrics.items()},
                     "artifacts": ";".join(paths)})

    summary = {
        "version": __version__,
        "task": cfg.task,
        "config_sha256": cfg.sha256(),
        "input_hash": input_hash(cfg),
        "seeds": list(cfg.seeds),
        "complete": error is None,
        "metrics": _aggregate(rows),
        "per_seed": rows,
        "wall_time": time.perf_counter() - start,
    }
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _atomic_write(out / "per_seed.csv", _csv(rows))
    marker = out / PARTIAL_MARKER
    if error is None:
        if marker.exists():
            marker.unlink()
    else:
        _atomic_write(marker, error + "\n")
    return summary


def _aggregate(rows: List[Dict]) -> Dict[str, Dict[str, float]]:
    """Mean of every metric per sweep point (a single point "" for plain runs)."""
    groups: Dict[str, Dict[str, List[float]]] = {}
    for row in rows:
        g = groups.setdefault(row["point"], {})
        for k, v in row.items():
            if k in ("point", "seed", "artifacts") or v is None:
                continue
            g.setdefault(k, []).append(v)
    return {p: {k: sum(v) / len(v) for k, v in sorted(m.items())} for p, m in groups.items()}


def _csv(rows: List[Dict]) -> str:
    keys: List[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row.get(k) is None else row[k] for k in keys})
    return buf.getvalue()


def report(dirs: Sequence[Path]) -> str:
    """Plain-text table of the mean metrics found in each run directory."""
    lines = []
    for d in dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"no summary.json in {d}")
        s = json.loads(path.read_text())
        status = "" if s.get("complete", True) else "  (partial)"
        lines.append(f"{d}: {s['task']} seeds={s['seeds']}{status}")
        for point, metrics in s["metrics"].items():
            if point:
                lines.append(f"  [{point}]")
            for k, v in metrics.items():
                lines.append(f"    {k:<32} {v:.6g}")
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cimlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        if verb == "report":
            p.add_argument("dirs", nargs="*", type=Path, help="run directories (default: --out)")
            p.add_argument("--out", type=Path, default=None)
            continue
        p.add_argument("--config", type=Path, default=None, help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="run this single seed instead of the config's list")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: config output_dir)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "report":
            dirs = list(args.dirs) or ([args.out] if args.out else [])
            if not dirs:
                raise ConfigError("report needs a run directory")
            sys.stdout.write(report(dirs))
            return 0
        cfg = load_config(args.config) if args.config else ExperimentConfig(task="train" if args.verb == "run" else args.verb)
        if args.verb != "run" and cfg.task != args.verb:
            cfg = cfg.with_value("task", args.verb)
        if args.seed is not None:
            cfg = cfg.with_seeds([args.seed])
        out = args.out or Path(cfg.output_dir)
        summary = execute(cfg, out, lab_threads())
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for point, metrics in summary["metrics"].items():
        head = f"[{point}] " if point else ""
        print(head + ", ".join(f"{k}={v:.4g}" for k, v in metrics.items()))
    print(f"wrote {out / 'summary.json'}")
    return 0 if summary["complete"] else 1


if __name__ == "__main__":
    sys.exit(main())
