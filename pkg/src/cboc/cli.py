"""Experiment configuration, multi-run orchestration, and the ``cboc`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .acquisition import UTILITIES, AcquisitionConfig
from .benchmarks import REGISTRY, BenchmarkError, average_gap, make_problem, resolve_dim, sample_hetero, theorem1_bound
from .clients import TOPOLOGIES, RunHistory, run_cboc, stream
from .consensus import SCHEMES, ConsensusScheme, write_matrices_csv

log = logging.getLogger(__name__)

METHODS = {"cboc-l": "leader", "cboc-u": "uniform", "individual": "identity"}
HETERO_MODES = ("homogeneous", "sampled", "explicit")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    function: str
    D: int | None = None
    K: int = 5
    T: int | None = None
    N0: int | None = None
    scheme: str = "leader"
    utility: str = "ei"
    hetero: str = "homogeneous"
    hetero_params: list[tuple[float, float, float]] = field(default_factory=list)
    noise_sd: float = 0.0
    runs: int = 30
    seed: int = 0
    out: str = "results"
    adjacency: str | None = None
    kappa: float | None = None
    topology: str = "centralized"
    sense: str = "minimize"

    def __post_init__(self) -> None:
        if self.function not in REGISTRY:
            raise ConfigError("function", f"unknown function {self.function!r}; choose from {sorted(REGISTRY)}")
        try:
            self.D = resolve_dim(self.function, self.D)
        except BenchmarkError as exc:
            raise ConfigError("D", str(exc)) from exc
        if self.T is None:
            self.T = 20 * self.D
        if self.N0 is None:
            self.N0 = 5 * self.D
        for name in ("K", "T", "runs"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.N0 < 2:
            raise ConfigError("N0", "need at least two initial points to fit a surrogate")
        choices = {
            "scheme": SCHEMES,
            "utility": UTILITIES,
            "hetero": HETERO_MODES,
            "topology": TOPOLOGIES,
            "sense": ("minimize", "maximize"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"{getattr(self, name)!r} is not one of {allowed}")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd", "must be >= 0")
        if self.kappa is not None and not self.kappa > 0:
            raise ConfigError("kappa", "must be positive")
        if self.hetero == "explicit" and len(self.hetero_params) != self.K:
            raise ConfigError("hetero_params", f"need exactly K={self.K} triples, got {len(self.hetero_params)}")
        for a1, _, _ in self.hetero_params:
            if not a1 > 0:
                raise ConfigError("hetero_params", "a1 must be positive")

    @property
    def method(self) -> str:
        return {v: k for k, v in METHODS.items()}[self.scheme]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None or (f.name == "hetero_params" and not value):
                continue
            if f.name == "hetero_params":
                value = "; ".join(",".join(repr(float(a)) for a in triple) for triple in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hetero_params"] = [list(t) for t in self.hetero_params]
        return d


def _coerce(name: str, raw):
    kinds = {
        "D": int, "K": int, "T": int, "N0": int, "runs": int, "seed": int,
        "noise_sd": float, "kappa": float,
    }
    if raw is None:
        return None
    try:
        if name in kinds:
            return kinds[name](raw)
        if name == "hetero_params":
            if isinstance(raw, str):
                triples = [t for t in raw.split(";") if t.strip()]
                raw = [[float(a) for a in t.split(",")] for t in triples]
            out = [tuple(float(a) for a in t) for t in raw]
            if any(len(t) != 3 for t in out):
                raise ValueError("each triple needs three numbers a1,a2,a3")
            return out
        return str(raw).strip()
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"cannot parse {raw!r}: {exc}") from exc


def read_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def parse_config(source=None, **overrides) -> ExperimentConfig:
    """Build a validated config from a file path, a mapping, and/or keyword overrides."""
    if source is None:
        values: dict = {}
    elif isinstance(source, dict):
        values = dict(source)
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        values = read_config_text(path.read_text(encoding="utf-8"))
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    if "function" not in values:
        raise ConfigError("function", "missing required key")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in values.items()})


def load_adjacency(path: str, n_clients: int) -> np.ndarray:
    A = np.loadtxt(path, delimiter=",", ndmin=2)
    if A.shape != (n_clients, n_clients):
        raise ConfigError("adjacency", f"expected a {n_clients}x{n_clients} matrix, got {A.shape}")
    return A.astype(bool)


def build_problems(cfg: ExperimentConfig, run: int):
    """The K client problems for one replicate; independent of the method being run."""
    problems = []
    for k in range(cfg.K):
        if cfg.hetero == "homogeneous":
            a1, a2, a3 = 1.0, 0.0, 0.0
        elif cfg.hetero == "explicit":
            a1, a2, a3 = cfg.hetero_params[k]
        else:
            a1, a2, a3 = sample_hetero(REGISTRY[cfg.function].hetero, stream(cfg.seed, run, k, "hetero"))
        problems.append(
            make_problem(cfg.function, cfg.D, sense=cfg.sense, a1=a1, a2=a2, a3=a3, noise_sd=cfg.noise_sd)
        )
    return problems


def run_one(cfg: ExperimentConfig, run: int, scheme: str | None = None) -> RunHistory:
    adjacency = load_adjacency(cfg.adjacency, cfg.K) if cfg.adjacency else None
    return run_cboc(
        build_problems(cfg, run),
        ConsensusScheme(scheme or cfg.scheme, cfg.T, adjacency),
        AcquisitionConfig(utility_kind=cfg.utility),
        cfg.N0,
        cfg.T,
        cfg.seed,
        run=run,
        topology=cfg.topology,
        kappa=cfg.kappa,
    )


def _run_safely(args):
    cfg, run, scheme = args
    try:
        return run, run_one(cfg, run, scheme), None
    except Exception as exc:  # noqa: BLE001 - reported in summary.json
        log.exception("run %d failed", run)
        return run, None, f"{type(exc).__name__}: {exc}"


ROW_FIELDS = ["run", "client", "iteration"]


def row_header(dim: int) -> list[str]:
    return ROW_FIELDS + [f"x{d + 1}" for d in range(dim)] + [
        "y", "incumbent", "gap", "regret", "cum_regret", "leader", "w_diag_mean",
    ]


def history_rows(run: int, h: RunHistory):
    cum = np.cumsum(h.regret, axis=1)
    for k in range(h.n_clients):
        for t in range(h.horizon):
            yield [run, k, t, *(repr(float(v)) for v in h.consensus_points[k, t])] + [
                repr(float(h.observations[k, t])),
                repr(float(h.incumbents[k, t])),
                repr(float(h.gap[k, t])),
                repr(float(h.regret[k, t])),
                repr(float(cum[k, t])),
                int(h.leaders[t]),
                repr(float(np.mean(np.diag(h.matrices[t])))),
            ]


def run_experiment(cfg: ExperimentConfig, *, scheme: str | None = None, out: str | Path | None = None, workers: int = 1) -> dict:
    """Run ``cfg.runs`` replicates, write rows.csv / matrices.csv / summary.json, return the summary."""
    out_dir = Path(out or cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scheme = scheme or cfg.scheme
    started = time.perf_counter()
    jobs = [(cfg, r, scheme) for r in range(cfg.runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_safely, jobs))
    else:
        results = [_run_safely(j) for j in jobs]
    results.sort(key=lambda item: item[0])
    done = [(r, h) for r, h, err in results if h is not None]
    failed = {r: err for r, _, err in results if err is not None}

    with open(out_dir / "rows.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(row_header(cfg.D))
        for r, h in done:
            writer.writerows(history_rows(r, h))
    write_matrices_csv(out_dir / "matrices.csv", [h.matrices for _, h in done], [r for r, _ in done])

    method = {v: k for k, v in METHODS.items()}[scheme]
    summary = {
        "method": method,
        "status": "ok" if not failed else "partial",
        "failed_runs": {str(r): e for r, e in failed.items()},
        "wall_time_s": time.perf_counter() - started,
        "seeds": {"master": cfg.seed, "runs": [r for r, _ in done]},
        "config": cfg.to_dict() | {"scheme": scheme},
        "notes": {
            "gbar_sd": "sample sd (ddof=1) over runs of the per-run client-mean final Gap",
            "regret_bound": "third (tail-sum) term of the bound omitted: unspecified constants",
            "client_ids": "0-based",
        },
    }
    if done:
        finals = [h.final_gap for _, h in done]
        mean, sd = average_gap(finals)
        curve = np.mean([h.gap.mean(axis=0) for _, h in done], axis=0)
        cum_regret = np.mean([np.cumsum(h.regret, axis=1).mean(axis=0) for _, h in done], axis=0)
        summary.update(
            gbar={"mean": mean, "sd": sd},
            run_means=[float(np.mean(g)) for g in finals],
            initial_best=[h.initial_best.tolist() for _, h in done],
            gap_curve=curve.tolist(),
            mean_cumulative_regret=cum_regret.tolist(),
        )
        if cfg.kappa is not None and cfg.noise_sd > 0 and cfg.T > 1 and cfg.kappa < 1 / math.sqrt(2 * math.pi):
            summary["regret_bound"] = theorem1_bound(cfg.T, cfg.D, cfg.noise_sd, cfg.kappa)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return summary


def compare_methods(cfg: ExperimentConfig, methods, *, out: str | Path | None = None, workers: int = 1) -> list[dict]:
    """Run several methods on identical per-run problems; writes comparison.csv."""
    methods = list(methods)
    if len(methods) < 2:
        raise ConfigError("methods", "need at least two methods to compare")
    for m in methods:
        if m not in METHODS:
            raise ConfigError("methods", f"unknown method {m!r}; choose from {sorted(METHODS)}")
    out_dir = Path(out or cfg.out)
    table = []
    for m in methods:
        summary = run_experiment(cfg, scheme=METHODS[m], out=out_dir / m, workers=workers)
        gbar = summary.get("gbar", {"mean": float("nan"), "sd": float("nan")})
        table.append({"method": m, "mean": gbar["mean"], "sd": gbar["sd"], "status": summary["status"]})
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "mean", "sd", "status"])
        writer.writeheader()
        writer.writerows(table)
    return table


def read_comparison(path: str | Path) -> list[tuple[str, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["method"], float(r["mean"]), float(r["sd"])) for r in csv.DictReader(fh)]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cboc", description="Collaborative Bayesian optimisation via consensus")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--runs", type=int)
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int, default=1)

    common(sub.add_parser("run", help="run one method for all replicates"))
    cmp_ = sub.add_parser("compare", help="run several methods on shared problems")
    common(cmp_)
    cmp_.add_argument("--methods", default="cboc-l,cboc-u,individual")
    b = sub.add_parser("bound", help="evaluate the cumulative-regret bound")
    b.add_argument("--T", type=int, required=True)
    b.add_argument("--D", type=int, required=True)
    b.add_argument("--v", type=float, required=True)
    b.add_argument("--kappa", type=float, required=True)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bound":
        try:
            print(repr(theorem1_bound(args.T, args.D, args.v, args.kappa)))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0
    try:
        cfg = parse_config(args.config, seed=args.seed, runs=args.runs, out=args.out)
        if args.command == "run":
            summary = run_experiment(cfg, workers=args.workers)
            if "gbar" in summary:
                print(f"{summary['method']}: Gbar = {summary['gbar']['mean']:.4f} (+-{summary['gbar']['sd']:.4f})")
            return 0 if summary["status"] == "ok" else 1
        table = compare_methods(cfg, [m.strip() for m in args.methods.split(",") if m.strip()], workers=args.workers)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    print(f"{'method':<12}{'mean':>10}{'sd':>10}")
    for row in table:
        print(f"{row['method']:<12}{row['mean']:>10.4f}{row['sd']:>10.4f}")
    return 0 if all(r["status"] == "ok" for r in table) else 1


if __name__ == "__main__":
    sys.exit(main())
