"""Seed sweeps over scenarios and training modes, with curves, tests and a report.

An experiment is the cross product of scenarios, modes and seeds.  Each cell
trains one agent pair and owns its own output directory; aggregation then
reduces per-episode performance across seeds into quartile curves, writes
CSVs, an SVG plot per scenario and a markdown report comparing modes at a
few reporting episodes with paired significance tests.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from marlin.gridworld import STEP_MAX, load_builtin, load_scenario
from marlin.negotiation import make_backends
from marlin.trainer import MODES, TrainerConfig, read_episode_csv, run_training

log = logging.getLogger(__name__)

DEFAULT_CHECKPOINTS = (100, 850, 1600)
# paired differences spread less than this (relative) are treated as a constant shift
DEGENERATE_RTOL = 1e-12


class DegenerateVariance(UserWarning):
    """Paired differences have zero variance; the t statistic is not informative."""


@dataclass(frozen=True)
class ExperimentSpec:
    scenarios: tuple[str, ...]
    modes: tuple[str, ...] = ("marlin", "mappo")
    seeds: tuple[int, ...] = tuple(range(5))
    episode_max: int = 1600
    checkpoints: tuple[int, ...] = DEFAULT_CHECKPOINTS
    step_max: int = STEP_MAX
    backend: str = "oracle"
    report_window: int = 50
    workers: int = 1
    map_files: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("scenarios", "modes", "seeds", "checkpoints"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "map_files", dict(self.map_files))
        if not self.scenarios or not self.modes or not self.seeds:
            raise ValueError("need at least one scenario, mode and seed")
        bad = set(self.modes) - set(MODES)
        if bad:
            raise ValueError(f"unknown modes {sorted(bad)}; choose from {MODES}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        for c in self.checkpoints:
            if not 1 <= c <= self.episode_max:
                raise ValueError(f"checkpoint {c} outside 1..{self.episode_max}")
        if self.report_window < 1:
            raise ValueError("report_window must be positive")

    @property
    def supports_significance(self) -> bool:
        return len(self.seeds) >= 2

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment spec keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("scenarios", "modes", "seeds", "checkpoints"):
            d[k] = list(d[k])
        return d

    def world(self, scenario: str):
        if scenario in self.map_files:
            return load_scenario(Path(self.map_files[scenario]).read_text())
        return load_builtin(scenario)

    def trainer_config(self, mode: str, seed: int) -> TrainerConfig:
        return TrainerConfig(mode=mode, seed=seed, episode_max=self.episode_max, step_max=self.step_max)


# ---------------------------------------------------------------------------
# curves

@dataclass
class CurveSummary:
    """Per-episode quartiles of performance across seeds for one scenario and mode."""

    scenario: str
    mode: str
    seeds: tuple[int, ...]
    runs: np.ndarray  # (n_seeds, n_episodes)
    q1: np.ndarray
    median: np.ndarray
    q3: np.ndarray

    @classmethod
    def from_runs(cls, scenario: str, mode: str, runs: Mapping[int, Sequence[float]]) -> "CurveSummary":
        seeds = tuple(sorted(runs))
        lengths = {len(runs[s]) for s in seeds}
        if len(lengths) != 1:
            raise ValueError("all runs must cover the same episodes")
        arr = np.array([np.asarray(runs[s], dtype=np.float64) for s in seeds])
        q1, med, q3 = np.percentile(arr, [25, 50, 75], axis=0)
        return cls(scenario, mode, seeds, arr, q1, med, q3)

    @property
    def n_episodes(self) -> int:
        return self.runs.shape[1]

    def at(self, episode: int) -> tuple[float, float, float]:
        """Quartiles after ``episode`` completed episodes (1-based)."""
        i = episode - 1
        return float(self.q1[i]), float(self.median[i]), float(self.q3[i])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", *(f"seed_{s}" for s in self.seeds), "q1", "median", "q3"])
            for e in range(self.n_episodes):
                w.writerow([e, *(repr(float(v)) for v in self.runs[:, e]),
                            repr(float(self.q1[e])), repr(float(self.median[e])), repr(float(self.q3[e]))])

    @classmethod
    def read_csv(cls, path, scenario: str, mode: str) -> "CurveSummary":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        seed_cols = [i for i, h in enumerate(header) if h.startswith("seed_")]
        seeds = tuple(int(header[i][5:]) for i in seed_cols)
        col = {h: i for i, h in enumerate(header)}
        runs = np.array([[float(r[i]) for r in body] for i in seed_cols]).reshape(len(seeds), len(body))
        q1 = np.array([float(r[col["q1"]]) for r in body])
        med = np.array([float(r[col["median"]]) for r in body])
        q3 = np.array([float(r[col["q3"]]) for r in body])
        return cls(scenario, mode, seeds, runs, q1, med, q3)


# ---------------------------------------------------------------------------
# statistics

@dataclass(frozen=True)
class PairedTestResult:
    statistic: float
    p_value: float
    sign_p_value: float
    n: int
    mean_difference: float
    degenerate: bool = False


def window_means(runs: Mapping[int, Sequence[float]], window: tuple[int, int]) -> dict[int, float]:
    lo, hi = window
    out = {}
    for seed, perf in runs.items():
        perf = np.asarray(perf, dtype=np.float64)
        if not 0 <= lo < hi <= len(perf):
            raise ValueError(f"window {window} outside the {len(perf)} recorded episodes")
        out[seed] = float(perf[lo:hi].mean())
    return out


def sign_test(differences: Sequence[float]) -> float:
    """Two-sided exact binomial sign test; zero differences are dropped."""
    d = np.asarray(differences, dtype=np.float64)
    pos, neg = int((d > 0).sum()), int((d < 0).sum())
    if pos + neg == 0:
        return 1.0
    return float(stats.binomtest(pos, pos + neg, 0.5).pvalue)


def paired_test(records_a: Mapping[int, Sequence[float]], records_b: Mapping[int, Sequence[float]],
                window: tuple[int, int]) -> PairedTestResult:
    """Paired t-test of per-seed mean performance over ``window`` (half-open episode range).

    The statistic is positive when ``a`` outperforms ``b``.  When every
    paired difference is the same (up to rounding), the t statistic is
    undefined: identical runs give ``t = 0, p = 1``; a constant nonzero
    shift gives ``t = +-inf, p = 0`` with ``degenerate`` set and a
    :class:`DegenerateVariance` warning, and callers should lean on
    ``sign_p_value``.
    """
    if set(records_a) != set(records_b):
        raise ValueError("paired test needs the same seeds on both sides")
    seeds = sorted(records_a)
    if len(seeds) < 2:
        raise ValueError("paired test needs at least two seeds")
    ma, mb = window_means(records_a, window), window_means(records_b, window)
    diffs = np.array([ma[s] - mb[s] for s in seeds])
    mean_diff = float(diffs.mean())
    sign_p = sign_test(diffs)
    if np.ptp(diffs) <= DEGENERATE_RTOL * max(1.0, abs(mean_diff)):
        if np.all(diffs == 0.0):
            return PairedTestResult(0.0, 1.0, sign_p, len(seeds), 0.0, degenerate=True)
        warnings.warn("paired differences have zero variance; reporting the sign test", DegenerateVariance, stacklevel=2)
        return PairedTestResult(math.copysign(math.inf, mean_diff), 0.0, sign_p, len(seeds), mean_diff, degenerate=True)
    res = stats.ttest_rel([ma[s] for s in seeds], [mb[s] for s in seeds])
    return PairedTestResult(float(res.statistic), float(res.pvalue), sign_p, len(seeds), mean_diff)


def significance_marker(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


# ---------------------------------------------------------------------------
# running

@dataclass(frozen=True)
class CellFailure:
    scenario: str
    mode: str
    seed: int
    error: str


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    curves: dict[tuple[str, str], CurveSummary]
    failures: list[CellFailure]
    out_dir: Path | None = None


def cell_dir(out_dir: Path, scenario: str, mode: str, seed: int) -> Path:
    return out_dir / "runs" / scenario / mode / f"seed_{seed}"


def run_cell(spec: ExperimentSpec, scenario: str, mode: str, seed: int, out_dir=None) -> list[float]:
    """Train one (scenario, mode, seed) cell; returns its per-episode performance."""
    world = spec.world(scenario)
    backends = make_backends(spec.backend, world.n_agents) if mode != "mappo" else []
    target = cell_dir(Path(out_dir), scenario, mode, seed) if out_dir is not None else None
    record = run_training(spec.trainer_config(mode, seed), world, backends, target, trajectories=False)
    return [e.performance for e in record.episodes]


def _run_cell_safe(args):
    spec, scenario, mode, seed, out_dir = args
    try:
        return args[1:4], run_cell(spec, scenario, mode, seed, out_dir), None
    except Exception as exc:  # one failed cell must not sink the sweep
        log.exception("cell %s/%s/seed %d failed", scenario, mode, seed)
        return args[1:4], None, f"{type(exc).__name__}: {exc}"


def run_experiment(spec: ExperimentSpec, out_dir=None) -> ExperimentResult:
    """Run every cell, aggregate survivors and (with ``out_dir``) write all outputs."""
    out = Path(out_dir) if out_dir is not None else None
    jobs = [(spec, sc, mode, seed, out) for sc in spec.scenarios for mode in spec.modes for seed in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_run_cell_safe, jobs))
    else:
        results = [_run_cell_safe(job) for job in jobs]
    runs: dict[tuple[str, str], dict[int, list[float]]] = {}
    failures = []
    for (sc, mode, seed), perf, err in results:
        if err is not None:
            failures.append(CellFailure(sc, mode, seed, err))
        else:
            runs.setdefault((sc, mode), {})[seed] = perf
    curves = {key: CurveSummary.from_runs(key[0], key[1], r) for key, r in runs.items()}
    result = ExperimentResult(spec, curves, failures, out)
    if out is not None:
        write_outputs(result, out)
    return result


def aggregate_dir(spec: ExperimentSpec, out_dir) -> ExperimentResult:
    """Rebuild an :class:`ExperimentResult` from cell directories already on disk."""
    out = Path(out_dir)
    runs: dict[tuple[str, str], dict[int, list[float]]] = {}
    failures = []
    for sc in spec.scenarios:
        for mode in spec.modes:
            for seed in spec.seeds:
                path = cell_dir(out, sc, mode, seed) / "episodes.csv"
                if not path.exists():
                    failures.append(CellFailure(sc, mode, seed, "missing episodes.csv"))
                    continue
                runs.setdefault((sc, mode), {})[seed] = [float(r["performance"]) for r in read_episode_csv(path)]
    curves = {key: CurveSummary.from_runs(key[0], key[1], r) for key, r in runs.items()}
    return ExperimentResult(spec, curves, failures, out)


# ---------------------------------------------------------------------------
# outputs

def write_outputs(result: ExperimentResult, out_dir) -> None:
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)
    for (sc, mode), curve in result.curves.items():
        curve.write_csv(out / "curves" / f"{sc}_{mode}.csv")
    write_summary_csv(result, out / "summary.csv")
    for sc in result.spec.scenarios:
        curves = [result.curves[(sc, m)] for m in result.spec.modes if (sc, m) in result.curves]
        if curves:
            (out / "plots" / f"{sc}.svg").write_text(render_svg(sc, curves))
    (out / "report.md").write_text(render_report(result))
    with open(out / "experiment.json", "w") as fh:
        json.dump(result.spec.to_dict(), fh, indent=1)


def write_summary_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "mode", "episode", "q1", "median", "q3", "n_seeds"])
        for (sc, mode), curve in sorted(result.curves.items()):
            for c in result.spec.checkpoints:
                if c <= curve.n_episodes:
                    q1, med, q3 = curve.at(c)
                    w.writerow([sc, mode, c, repr(q1), repr(med), repr(q3), len(curve.seeds)])


def checkpoint_window(checkpoint: int, width: int) -> tuple[int, int]:
    """Episode range ``[checkpoint - width, checkpoint)`` clipped at 0."""
    return (max(0, checkpoint - width), checkpoint)


def render_report(result: ExperimentResult) -> str:
    spec = result.spec
    lines = [
        "# Experiment report",
        "",
        f"Seeds: {', '.join(map(str, spec.seeds))}. Episodes: {spec.episode_max}, capped at {spec.step_max} moves. "
        f"Negotiation backend: {spec.backend}.",
        "",
        "Cells show the median over seeds of per-episode performance at each reporting episode. "
        f"Markers compare each mode against `mappo` with a paired t-test on per-seed mean performance over the "
        f"{spec.report_window} episodes ending at the reporting episode "
        "(* p<0.05, ** p<0.01, *** p<0.001).",
        "",
    ]
    header = ["scenario", "mode", *(f"episode {c}" for c in spec.checkpoints)]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for sc in spec.scenarios:
        base = result.curves.get((sc, "mappo"))
        for mode in spec.modes:
            curve = result.curves.get((sc, mode))
            if curve is None:
                lines.append("| " + " | ".join([sc, mode, *(["failed"] * len(spec.checkpoints))]) + " |")
                continue
            cells = []
            for c in spec.checkpoints:
                _, med, _ = curve.at(c)
                mark = ""
                if base is not None and mode != "mappo" and set(base.seeds) == set(curve.seeds) and len(curve.seeds) >= 2:
                    window = checkpoint_window(c, spec.report_window)
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", DegenerateVariance)
                        test = paired_test(_runs_of(curve), _runs_of(base), window)
                    p = test.sign_p_value if test.degenerate and test.mean_difference != 0 else test.p_value
                    mark = significance_marker(p) if test.mean_difference > 0 else ""
                cells.append(f"{med:.4f}{mark}")
            lines.append("| " + " | ".join([sc, mode, *cells]) + " |")
    if result.failures:
        lines += ["", "## Failed cells", ""]
        for f in result.failures:
            lines.append(f"- {f.scenario} / {f.mode} / seed {f.seed}: {f.error}")
    return "\n".join(lines) + "\n"


def _runs_of(curve: CurveSummary) -> dict[int, np.ndarray]:
    return {s: curve.runs[i] for i, s in enumerate(curve.seeds)}


PALETTE = {"marlin": "#1f77b4", "mappo": "#d62728", "llm-only": "#2ca02c"}


def _smooth(y: np.ndarray, width: int) -> np.ndarray:
    if width <= 1 or len(y) < width:
        return y
    kernel = np.ones(width) / width
    head = np.cumsum(y[: width - 1]) / np.arange(1, width)
    return np.concatenate([head, np.convolve(y, kernel, mode="valid")])


def render_svg(scenario: str, curves: Sequence[CurveSummary], smooth: int = 25,
               width: int = 640, height: int = 400) -> str:
    """Median lines with interquartile bands, one colour per mode."""
    left, right, top, bottom = 56, 120, 30, 44
    pw, ph = width - left - right, height - top - bottom
    n = max(c.n_episodes for c in curves)

    def sx(e):
        return left + pw * e / max(n - 1, 1)

    def sy(v):
        return top + ph * (1.0 - v)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{left + pw / 2}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{scenario}</text>',
    ]
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(v)
        parts.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.2f}</text>')
    for e in np.linspace(0, n - 1, 5):
        x = sx(e)
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle" font-family="sans-serif" font-size="11">{int(round(e)) + 1}</text>')
    parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="12">episode</text>')
    parts.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 14 {top + ph / 2})">performance</text>')
    for k, c in enumerate(curves):
        colour = PALETTE.get(c.mode, "#555")
        q1, med, q3 = (_smooth(a, smooth) for a in (c.q1, c.median, c.q3))
        xs = [sx(e) for e in range(c.n_episodes)]
        upper = " ".join(f"{x:.1f},{sy(v):.1f}" for x, v in zip(xs, q3))
        lower = " ".join(f"{x:.1f},{sy(v):.1f}" for x, v in zip(reversed(xs), q1[::-1]))
        parts.append(f'<polygon points="{upper} {lower}" fill="{colour}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{x:.1f},{sy(v):.1f}" for x, v in zip(xs, med))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        ly = top + 16 + 18 * k
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 34}" y="{ly + 4}" font-family="sans-serif" font-size="12">{c.mode}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
