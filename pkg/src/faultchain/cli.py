"""Command-line front end: enumerate, train, baseline, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .agent import SearchConfig, SearchResult, run_search
from .baselines import (TE_DEFAULTS, TE_PRETRAIN_ITERATIONS, PretrainedTable, pfw_rl_run,
                        pfw_rl_te_run, te_pretrain)
from .grid import BUILTIN_CASES, GridCase, load_case
from .oracle import (LARGE_ENUMERATION, ChainCatalog, count_risky, enumerate_chains,
                     estimate_leaves, regret_series, top_s)

log = logging.getLogger("faultchain")


@dataclass
class ExperimentConfig:
    case: str = "case39"
    format: str | None = None
    merge_parallel: bool = False
    load_scale: float = 1.0
    horizon: int = 3
    iterations: int = 1200
    kappa: int = 3
    batch: int = 32
    explore: int = 250
    gamma: float = 0.99
    alpha: float = 0.005
    alpha_tab: float = 0.1
    eps0: float = 0.01
    threshold_mw: float = 0.0
    hidden: int = 12
    out_features: int = 12
    hops: int = 3
    head_width: int = 64
    seed: int = 0
    budget_seconds: float | None = None
    max_grad_norm: float | None = None
    mc_repeats: int = 1
    jobs: int = 1
    catalog: str | None = None
    out: str = "out"
    allow_large: bool = False

    def validate(self) -> None:
        if self.case not in BUILTIN_CASES and not Path(self.case).is_file():
            raise FileNotFoundError(f"case file not found: {self.case}")
        if self.catalog is not None and not Path(self.catalog).is_file():
            raise FileNotFoundError(f"catalog file not found: {self.catalog}")
        if self.mc_repeats < 1 or self.jobs < 1:
            raise ValueError("mc_repeats and jobs must be >= 1")
        self.search_config()

    def search_config(self, seed: int | None = None) -> SearchConfig:
        return SearchConfig(
            iterations=self.iterations, horizon=self.horizon, kappa=self.kappa, batch=self.batch,
            explore=self.explore, gamma=self.gamma, alpha=self.alpha, eps0=self.eps0,
            threshold_mw=self.threshold_mw, seed=self.seed if seed is None else seed,
            hidden=self.hidden, out_features=self.out_features, hops=self.hops,
            head_width=self.head_width, load_factor=self.load_scale,
            budget_seconds=self.budget_seconds, max_grad_norm=self.max_grad_norm,
            alpha_tab=self.alpha_tab,
        )

    def load(self) -> GridCase:
        return load_case(self.case, self.format, merge_parallel=self.merge_parallel)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if raw.lower() not in _BOOL:
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or name in ("budget_seconds", "max_grad_norm"):
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys may use dashes."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in _FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


# -- output helpers ----------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x)) if x is not None else ""


def _catalog_for(cfg: ExperimentConfig, case: GridCase, load_factor: float | None = None) -> ChainCatalog | None:
    if cfg.catalog:
        return ChainCatalog.read_jsonl(cfg.catalog, cfg.horizon)
    if estimate_leaves(case.n_branch, cfg.horizon) <= LARGE_ENUMERATION:
        lf = cfg.load_scale if load_factor is None else load_factor
        log.info("enumerating reference chains for %s at %.3g", case.name, lf)
        return enumerate_chains(case, lf, cfg.horizon)
    log.warning("no catalog and the chain space is too large to enumerate; regret not computed")
    return None


# -- run reports -------------------------------------------------------------------------------


def write_run(out: Path, algorithm: str, cfg: ExperimentConfig, seed: int, result: SearchResult,
              seconds: float, catalog: ChainCatalog | None, checkpoint: dict | None) -> dict:
    """Write the artifacts of one search run and return its report."""
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "episodes.jsonl", result.log)
    _write_jsonl(out / "chains.jsonl", (c.to_record() for c in result.chains))
    discovered = len(result.chains)
    accumulated = result.accumulated_tll
    s = discovered if result.stopped_by_budget or result.exhausted else cfg.iterations
    regret = best = None
    series = []
    if catalog is not None:
        rs = regret_series(catalog, result.chains, s)
        rs.write_csv(out / "regret.csv")
        regret, best, series = rs.final, rs.best_total, rs.regret
    if checkpoint is not None:
        _write_json(out / "checkpoint.json", checkpoint)
    _write_json(out / "timing.json", {
        "wall_clock_seconds": seconds,
        "search_seconds": result.search_seconds,
        "episode_ms": [1000.0 * t for t in result.episode_seconds],
    })
    report = {
        "algorithm": algorithm,
        "case": cfg.case,
        "load_factor": cfg.load_scale,
        "seed": seed,
        "discovered": discovered,
        "risky": len(result.risky),
        "accumulated_tll_mw": accumulated,
        "regret_s": s,
        "top_s_total_mw": best,
        "regret_mw": regret,
        "regret_series": series,
        "stopped_by_budget": result.stopped_by_budget,
        "exhausted": result.exhausted,
        "wall_clock_seconds": seconds,
        "search_seconds": result.search_seconds,
        "config": {**asdict(cfg), "seed": seed},
    }
    _write_json(out / "report.json", report)
    return report


def _summarize(reports: list[dict], out: Path) -> None:
    rows = []
    for key in ("discovered", "accumulated_tll_mw", "regret_mw"):
        vals = [r[key] for r in reports if r[key] is not None]
        if vals:
            sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
            rows.append([key, len(vals), _fmt(statistics.fmean(vals)), _fmt(sd)])
    _write_csv(out / "summary.csv", ["metric", "n", "mean", "sd"], rows)


def _repeat_dirs(cfg: ExperimentConfig) -> list[tuple[int, Path]]:
    out = Path(cfg.out)
    if cfg.mc_repeats == 1:
        return [(cfg.seed, out)]
    return [(cfg.seed + r, out / f"repeat_{r:03d}") for r in range(cfg.mc_repeats)]


def _run_one(job):
    kind, cfg, seed, out, pretrained = job
    case = cfg.load()
    catalog = _catalog_for(cfg, case)
    sc = cfg.search_config(seed)
    t0 = time.perf_counter()
    if kind == "grqn":
        result = run_search(case, sc)
        checkpoint = result.learner.params.to_dict()
    elif kind == "pfw_rl":
        result = pfw_rl_run(case, sc)
        checkpoint = result.learner.table.to_dict()
    else:
        result = pfw_rl_te_run(case, sc, pretrained)
        checkpoint = result.learner.table.to_dict()
    seconds = time.perf_counter() - t0
    return write_run(Path(out), kind, cfg, seed, result, seconds, catalog, checkpoint)


def _run_repeats(kind: str, cfg: ExperimentConfig, pretrained=None) -> list[dict]:
    jobs = [(kind, cfg, seed, str(d), pretrained) for seed, d in _repeat_dirs(cfg)]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [_run_one(j) for j in jobs]
    if cfg.mc_repeats > 1:
        _summarize(reports, Path(cfg.out))
    return reports


# -- subcommands -------------------------------------------------------------------------------


def cmd_enumerate(cfg: ExperimentConfig, top: int = 10) -> dict:
    case = cfg.load()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    catalog = enumerate_chains(case, cfg.load_scale, cfg.horizon, allow_large=cfg.allow_large,
                               progress=lambda a, n: log.info("first action %d done, %d chains", a, n))
    catalog.write_jsonl(out / "catalog.jsonl")
    best = top_s(catalog, top)
    _write_csv(out / "top_s.csv", ["rank", "tll_mw", "actions"],
               [[i + 1, _fmt(e.tll), "-".join(map(str, e.actions))] for i, e in enumerate(catalog.entries[:top])])
    summary = {
        "case": cfg.case,
        "load_factor": cfg.load_scale,
        "horizon": cfg.horizon,
        "chains": len(catalog),
        "risky": count_risky(catalog, cfg.threshold_mw),
        "threshold_mw": cfg.threshold_mw,
        "top": top,
        "top_total_mw": best.total,
        "pad": best.pad,
    }
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train(cfg: ExperimentConfig) -> list[dict]:
    return _run_repeats("grqn", cfg)


def cmd_baseline(cfg: ExperimentConfig, which: str, pretrained_path: str | None = None,
                 pretrain_load: float | None = None, pretrain_iterations: int | None = None) -> list[dict]:
    if which == "pfw_rl":
        return _run_repeats("pfw_rl", cfg)
    if which != "pfw_rl_te":
        raise ValueError(f"unknown baseline {which!r}")
    if pretrained_path:
        pretrained = PretrainedTable.load(pretrained_path)
    else:
        name = Path(cfg.case).stem
        if pretrain_load is None:
            if name not in TE_DEFAULTS:
                raise ValueError("--pretrain-load is required for cases without a default")
            pretrain_load = TE_DEFAULTS[name][0]
        iters = TE_PRETRAIN_ITERATIONS if pretrain_iterations is None else pretrain_iterations
        log.info("pretraining table at %.3g for %d iterations", pretrain_load, iters)
        pretrained = te_pretrain(cfg.load(), pretrain_load, iters, cfg.search_config())
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        pretrained.save(Path(cfg.out) / "pretrained.json")
    return _run_repeats("pfw_rl_te", cfg, pretrained)


def _collect_reports(run_dir: Path) -> list[tuple[Path, dict]]:
    found = []
    if (run_dir / "report.json").is_file():
        found.append(run_dir)
    else:
        found.extend(sorted(p.parent for p in run_dir.glob("*/report.json")))
    if not found:
        raise FileNotFoundError(f"no report.json under {run_dir}")
    return [(d, json.loads((d / "report.json").read_text())) for d in found]


def _svg_regret(curves: list[tuple[str, list[float]]], width=640, height=400) -> str:
    left, right, top, bottom = 70, 20, 20, 50
    xmax = max((len(c) for _, c in curves), default=1) or 1
    ymax = max((max(c) for _, c in curves if c), default=1.0) or 1.0
    pw, ph = width - left - right, height - top - bottom
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
           f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle" font-size="14">iteration</text>',
           f'<text x="16" y="{top + ph / 2}" text-anchor="middle" font-size="14" '
           f'transform="rotate(-90 16 {top + ph / 2})">regret (MW)</text>',
           f'<text x="{left - 4}" y="{top + 4}" text-anchor="end" font-size="10">{ymax:.4g}</text>',
           f'<text x="{left + pw}" y="{top + ph + 16}" text-anchor="end" font-size="10">{xmax}</text>']
    for i, (label, ys) in enumerate(curves):
        if not ys:
            continue
        pts = " ".join(f"{left + pw * (j + 1) / xmax:.2f},{top + ph * (1 - y / ymax):.2f}" for j, y in enumerate(ys))
        color = palette[i % len(palette)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                   f'<title>{label}</title></polyline>')
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 * (i + 1)}" text-anchor="end" '
                   f'font-size="11" fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_report(run_dirs, out_dir) -> list[dict]:
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    rows, curves = [], []
    for rd in run_dirs:
        for d, rep in _collect_reports(Path(rd)):
            label = f"{rep['algorithm']}:{d}"
            regret_csv = d / "regret.csv"
            if rep.get("regret_mw") is not None:
                if not regret_csv.is_file():
                    raise FileNotFoundError(f"{d} reports regret but has no regret.csv")
                ys = [float(r["regret_mw"]) for r in csv.DictReader(open(regret_csv))]
                if len(ys) != rep["discovered"] or abs(ys[-1] - rep["regret_mw"]) > 1e-6:
                    raise ValueError(f"{d}: regret.csv disagrees with report.json")
                curves.append((label, ys))
            rows.append({"run": str(d), **{k: rep[k] for k in (
                "algorithm", "seed", "discovered", "accumulated_tll_mw", "regret_mw")}})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # wall-clock time stays in report.json so these tables are reproducible byte for byte
    cols = ["run", "algorithm", "seed", "discovered", "accumulated_tll_mw", "regret_mw"]
    _write_csv(out / "comparison.csv", cols,
               [[r["run"], r["algorithm"], r["seed"], r["discovered"], _fmt(r["accumulated_tll_mw"]),
                 _fmt(r["regret_mw"])] for r in rows])
    summary = []
    for algo in sorted({r["algorithm"] for r in rows}):
        group = [r for r in rows if r["algorithm"] == algo]
        line = [algo, len(group)]
        for key in ("discovered", "accumulated_tll_mw", "regret_mw"):
            vals = [r[key] for r in group if r[key] is not None]
            mean = statistics.fmean(vals) if vals else None
            sd = statistics.stdev(vals) if len(vals) > 1 else (0.0 if vals else None)
            line += [_fmt(mean), _fmt(sd)]
        summary.append(line)
    header = ["algorithm", "runs"]
    for key in ("discovered", "accumulated_tll_mw", "regret_mw"):
        header += [f"{key}_mean", f"{key}_sd"]
    _write_csv(out / "summary.csv", header, summary)
    (out / "regret.svg").write_text(_svg_regret(curves))
    return rows


# -- argument parsing --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--case", help=f"MATPOWER (.m) or JSON case file, or one of {', '.join(BUILTIN_CASES)}")
    p.add_argument("--format", choices=["matpower-m", "native-json"])
    p.add_argument("--merge-parallel", dest="merge_parallel", action="store_const", const=True,
                   help="merge parallel branches into one equivalent branch")
    p.add_argument("--load-scale", dest="load_scale", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--threshold-mw", dest="threshold_mw", type=float)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")


def _search(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int)
    p.add_argument("--kappa", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--explore", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha-tab", dest="alpha_tab", type=float)
    p.add_argument("--eps0", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--out-features", dest="out_features", type=int)
    p.add_argument("--hops", type=int)
    p.add_argument("--head-width", dest="head_width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--budget-seconds", dest="budget_seconds", type=float)
    p.add_argument("--max-grad-norm", dest="max_grad_norm", type=float)
    p.add_argument("--mc-repeats", dest="mc_repeats", type=int)
    p.add_argument("--jobs", type=int, help="parallel processes for --mc-repeats")
    p.add_argument("--catalog", help="catalog JSONL from 'enumerate' used for regret")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faultchain", description="Search power grids for high-risk fault chains.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate", help="list every fault chain and its total load loss")
    _common(p)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--allow-large", dest="allow_large", action="store_const", const=True)

    p = sub.add_parser("train", help="graph recurrent Q-learning search")
    _common(p)
    _search(p)

    p = sub.add_parser("baseline", help="tabular Q-learning baselines")
    _common(p)
    _search(p)
    p.add_argument("--which", choices=["pfw_rl", "pfw_rl_te"], default="pfw_rl")
    p.add_argument("--pretrained", help="pretrained table JSON for pfw_rl_te")
    p.add_argument("--pretrain-load", dest="pretrain_load", type=float)
    p.add_argument("--pretrain-iterations", dest="pretrain_iterations", type=int)

    p = sub.add_parser("report", help="merge run directories into tables and a regret plot")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default="report")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            rows = cmd_report(args.runs, args.out)
            print(f"{len(rows)} runs -> {args.out}")
            return 0
        cfg = build_config(args)
        if args.command == "enumerate":
            s = cmd_enumerate(cfg, args.top)
            print(f"{s['chains']} chains, top {s['top']} total {s['top_total_mw']:.3f} MW -> {cfg.out}")
        elif args.command == "train":
            _print_reports(cmd_train(cfg))
        else:
            _print_reports(cmd_baseline(cfg, args.which, args.pretrained, args.pretrain_load,
                                        args.pretrain_iterations))
        return 0
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"faultchain: error: {msg}", file=sys.stderr)
        return 1


def _print_reports(reports) -> None:
    for r in reports:
        regret = "n/a" if r["regret_mw"] is None else f"{r['regret_mw']:.3f}"
        print(f"{r['algorithm']} seed={r['seed']} discovered={r['discovered']} "
              f"tll={r['accumulated_tll_mw']:.3f} MW regret={regret} MW")


if __name__ == "__main__":
    sys.exit(main())
