"""Synthetic-data experiments: generate, fit, score, fit rates, emit files."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .estimator import ConfigError, Dataset, FitError, OptimizerConfig, fit, init_near_truth
from .model import Activation, MixingMeasure, ModelSpec, Variant, eval_model, load_true_measure
from .voronoi import DEFAULT_GRID_SEED, QuadratureGrid, assign_cells, loss_L1, loss_L2, regression_distance

log = logging.getLogger(__name__)

SEED_ENV = "HMOE_SEED"
ABORT_FRACTION = 0.2
CSV_COLUMNS = ("variant", "K", "n", "trial", "loss_l2", "loss_l1_r1", "reg_l2", "epochs", "seed")
METRICS = ("loss_l2", "loss_l1_r1", "reg_l2")
VARIANT_IDS = {v: i for i, v in enumerate(Variant)}


class AbortBudgetExceeded(RuntimeError):
    pass


class RateFitError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    variants: tuple = tuple(Variant)
    K_fit: tuple = (3, 4)
    sample_sizes: tuple = (1000, 2000, 5000, 10000, 20000, 50000)
    trials: int = 5
    noise_sd: float = 0.1
    activation: Activation = field(default_factory=Activation)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    init_scale: float = 1.0
    init_exponent: float = 0.083
    master_seed: int = 0
    grid_size: int = 4096
    grid_seed: int = DEFAULT_GRID_SEED
    output_dir: str = "results"
    mha_loss: str = "loss_l1_r1"  # metric plotted and rate-fitted for MHA panels
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(Variant.parse(v) for v in self.variants))
        object.__setattr__(self, "K_fit", tuple(int(k) for k in self.K_fit))
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        ns = self.sample_sizes
        if not ns or any(b <= a for a, b in zip(ns, ns[1:])) or ns[0] < 1:
            raise ConfigError(f"sample sizes must be positive and strictly increasing, got {ns}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.noise_sd < 0:
            raise ConfigError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.init_scale < 0:
            raise ConfigError(f"init_scale must be >= 0, got {self.init_scale}")
        if self.grid_size < 1 or self.workers < 1:
            raise ConfigError("grid_size and workers must be positive")
        if self.mha_loss not in METRICS:
            raise ConfigError(f"mha_loss must be one of {METRICS}, got {self.mha_loss!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "activation" in doc:
            act = doc["activation"]
            doc["activation"] = Activation(act.get("kind", "sigmoid"), float(act.get("bias", 0.5)))
        if "optimizer" in doc:
            doc["optimizer"] = OptimizerConfig.from_dict(doc["optimizer"])
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, env=None) -> "ExperimentConfig":
        """Read TOML (or JSON by extension); ``HMOE_SEED`` overrides the master seed."""
        path = Path(path)
        text = path.read_text()
        try:
            doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                doc["master_seed"] = int(env[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from exc
        return cls.from_dict(doc)

    def spec(self, variant) -> ModelSpec:
        return ModelSpec(variant, self.activation)

    def plotted_metric(self, variant) -> str:
        return self.mha_loss if Variant.parse(variant) is Variant.MHA else "loss_l2"

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["variants"] = [v.value for v in self.variants]
        doc["K_fit"] = list(self.K_fit)
        doc["sample_sizes"] = list(self.sample_sizes)
        return doc


def child_seed(master: int, variant, K: int, n: int, trial: int) -> int:
    """64-bit seed determined by the tuple alone, independent of scheduling."""
    ss = np.random.SeedSequence([master, VARIANT_IDS[Variant.parse(variant)], K, n, trial])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def generate_dataset(Gstar: MixingMeasure, spec: ModelSpec, n: int, nu: float, seed: int) -> Dataset:
    if n < 1 or nu < 0:
        raise ConfigError(f"need n >= 1 and nu >= 0, got n={n}, nu={nu}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, Gstar.d))
    noise = rng.standard_normal(n)
    Y = eval_model(Gstar, spec, X) + nu * noise
    meta = {"n": n, "d": Gstar.d, "variant": spec.variant.value, "noise_sd": nu, "seed": seed}
    return Dataset(X, Y, meta)


@dataclass
class TrialResult:
    variant: str
    K: int
    n: int
    trial: int
    seed: int
    loss_l2: float = math.nan
    loss_l1_r1: float = math.nan
    reg_l2: float = math.nan
    epochs: int = 0
    loss_l2_init: float = math.nan
    sse_init: float = math.nan
    sse_final: float = math.nan
    reason: str = ""
    aborted: bool = False

    def key(self):
        return (VARIANT_IDS[Variant.parse(self.variant)], self.K, self.n, self.trial)

    def row(self) -> list[str]:
        return [self.variant, str(self.K), str(self.n), str(self.trial), repr(self.loss_l2),
                repr(self.loss_l1_r1), repr(self.reg_l2), str(self.epochs), str(self.seed)]


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    points: int


@dataclass
class RateReport:
    trials: list[TrialResult] = field(default_factory=list)
    summary: dict = field(default_factory=dict)  # (variant, K, n) -> {metric: (mean, sd)}
    rates: dict = field(default_factory=dict)  # (variant, K) -> {metric: RateFit | None}
    plotted: dict = field(default_factory=dict)  # variant -> metric

    def slope(self, variant, K: int, metric: str | None = None) -> float:
        variant = Variant.parse(variant).value
        metric = metric or self.plotted[variant]
        fit_ = self.rates[(variant, K)][metric]
        return math.nan if fit_ is None else fit_.slope


def run_trial(cfg: ExperimentConfig, Gstar: MixingMeasure, variant, K: int, n: int, trial: int,
              dump_dir=None) -> TrialResult:
    variant = Variant.parse(variant)
    spec = cfg.spec(variant)
    seed = child_seed(cfg.master_seed, variant, K, n, trial)
    res = TrialResult(variant.value, K, n, trial, seed)
    data = generate_dataset(Gstar, spec, n, cfg.noise_sd, seed)
    init_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    G0 = init_near_truth(Gstar, K, n, init_rng, cfg.init_scale, cfg.init_exponent)
    grid = QuadratureGrid.uniform(Gstar.d, cfg.grid_size, cfg.grid_seed)
    res.loss_l2_init = loss_L2(G0, Gstar, spec, grid)
    try:
        out = fit(G0, data, spec, cfg.optimizer)
    except FitError as exc:
        log.warning("trial %s K=%d n=%d #%d aborted: %s", variant.value, K, n, trial, exc)
        res.aborted, res.reason = True, str(exc)
        return res
    cells = assign_cells(out.measure, Gstar, spec, grid)
    res.loss_l2 = loss_L2(out.measure, Gstar, spec, grid, cells)
    res.loss_l1_r1 = loss_L1(out.measure, Gstar, 1, spec, grid, cells)
    res.reg_l2 = regression_distance(out.measure, Gstar, spec, grid)
    res.epochs = out.epochs
    res.sse_init, res.sse_final = out.trajectory[0], out.sse
    res.reason = out.reason
    if dump_dir is not None:
        path = Path(dump_dir) / f"fit_{variant.value}_K{K}_n{n}_t{trial}.json"
        path.write_text(json.dumps(out.to_dict()))
    return res


def _run_trial_star(args):
    return run_trial(*args)


def fit_rate(points) -> RateFit:
    """OLS of ln(loss) on ln(n); nonpositive or non-finite losses are dropped with a warning."""
    pts = [(float(n), float(v)) for n, v in points]
    good = [(n, v) for n, v in pts if v > 0 and math.isfinite(v) and n > 0]
    if len(good) < len(pts):
        warnings.warn(f"dropped {len(pts) - len(good)} nonpositive or non-finite point(s)", RuntimeWarning)
    if len(good) < 3:
        raise RateFitError(f"need at least 3 usable points, got {len(good)}")
    x = np.log([n for n, _ in good])
    y = np.log([v for _, v in good])
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([slope, intercept])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(resid @ resid) / ss_tot
    return RateFit(float(slope), float(intercept), r2, len(good))


def summarize(trials: list[TrialResult], cfg: ExperimentConfig | None = None) -> RateReport:
    trials = sorted(trials, key=TrialResult.key)
    report = RateReport(trials=trials)
    done = [t for t in trials if not t.aborted]
    groups: dict = {}
    for t in done:
        groups.setdefault((t.variant, t.K, t.n), []).append(t)
    for key, ts in groups.items():
        report.summary[key] = {}
        for m in METRICS:
            vals = np.array([getattr(t, m) for t in ts])
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            report.summary[key][m] = (float(vals.mean()), sd)
    for variant, K in sorted({(v, K) for v, K, _ in groups}, key=lambda p: (VARIANT_IDS[Variant.parse(p[0])], p[1])):
        report.plotted[variant] = cfg.plotted_metric(variant) if cfg else "loss_l2"
        ns = sorted(n for v, k, n in groups if (v, k) == (variant, K))
        report.rates[(variant, K)] = {}
        for m in METRICS:
            pts = [(n, report.summary[(variant, K, n)][m][0]) for n in ns]
            if m == "reg_l2" and all(v < 1e-12 for _, v in pts):
                warnings.warn(f"{variant} K={K}: regression distances vanish, slope skipped", RuntimeWarning)
                report.rates[(variant, K)][m] = None
                continue
            try:
                report.rates[(variant, K)][m] = fit_rate(pts)
            except RateFitError:
                report.rates[(variant, K)][m] = None
    return report


def run_experiment(cfg: ExperimentConfig, Gstar: MixingMeasure | None = None, dump_dir=None,
                   progress=None) -> RateReport:
    Gstar = Gstar or load_true_measure()
    jobs = [
        (cfg, Gstar, v, K, n, t, dump_dir)
        for v in cfg.variants for K in cfg.K_fit for n in cfg.sample_sizes for t in range(cfg.trials)
    ]
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            trials = list(pool.map(_run_trial_star, jobs))
    else:
        trials = []
        for job in jobs:
            trials.append(run_trial(*job))
            if progress:
                progress(trials[-1])
    aborted = sum(t.aborted for t in trials)
    report = summarize(trials, cfg)
    if trials and aborted / len(trials) > ABORT_FRACTION:
        raise AbortBudgetExceeded(f"{aborted} of {len(trials)} trials aborted", report)
    return report


def regression_rate_check(cfg_or_report) -> dict:
    """Log-log slope of the regression-function distance per (variant, K)."""
    report = cfg_or_report if isinstance(cfg_or_report, RateReport) else run_experiment(cfg_or_report)
    out = {}
    for key, fits in report.rates.items():
        f = fits.get("reg_l2")
        out[key] = None if f is None else f.slope
    return out


# ---------------------------------------------------------------------------
# outputs


def write_csv(trials: list[TrialResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t in sorted(trials, key=TrialResult.key):
            if not t.aborted:
                w.writerow(t.row())


def read_csv(path) -> list[TrialResult]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TrialResult(r["variant"], int(r["K"]), int(r["n"]), int(r["trial"]), int(r["seed"]),
                    float(r["loss_l2"]), float(r["loss_l1_r1"]), float(r["reg_l2"]), int(r["epochs"]))
        for r in rows
    ]


def rates_document(report: RateReport) -> dict:
    doc = {}
    for (variant, K), fits in report.rates.items():
        entry = {"plotted": report.plotted.get(variant, "loss_l2")}
        for m, f in fits.items():
            entry[m] = None if f is None else asdict(f)
        entry["means"] = {
            str(n): {m: report.summary[(v, k, n)][m][0] for m in METRICS}
            for (v, k, n) in sorted(report.summary) if (v, k) == (variant, K)
        }
        doc[f"{variant}/K={K}"] = entry
    return doc


def svg_loglog(title: str, ns, means, sds, fit_: RateFit | None, ylabel: str) -> str:
    """Log-log plot with two-sd error bars and a dashed fitted line."""
    W, Hh, L, R, T, B = 480, 360, 70, 20, 40, 50
    ns = np.asarray(ns, float)
    means = np.asarray(means, float)
    sds = np.asarray(sds, float)
    lo = np.where(means - 2 * sds > 0, means - 2 * sds, means / 10)
    hi = means + 2 * sds
    lx = np.log10(ns)
    ly_all = np.log10(np.concatenate([lo, hi, means]))
    x0, x1 = lx.min() - 0.1, lx.max() + 0.1
    y0, y1 = ly_all.min() - 0.1, ly_all.max() + 0.1
    if x1 - x0 < 1e-9:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.5, y1 + 0.5
    px = lambda v: L + (v - x0) / (x1 - x0) * (W - L - R)
    py = lambda v: Hh - B - (v - y0) / (y1 - y0) * (Hh - T - B)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}" viewBox="0 0 {W} {Hh}">',
        f'<rect x="0" y="0" width="{W}" height="{Hh}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<path d="M{L},{T} V{Hh - B} H{W - R}" fill="none" stroke="black"/>',
        f'<text x="{W / 2:.1f}" y="{Hh - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">log10 n</text>',
        f'<text x="16" y="{Hh / 2:.1f}" transform="rotate(-90 16 {Hh / 2:.1f})" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">log10 {ylabel}</text>',
    ]
    for tick in np.arange(math.ceil(x0), math.floor(x1) + 1):
        parts.append(f'<text x="{px(tick):.1f}" y="{Hh - B + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">{tick:g}</text>')
    for tick in np.arange(math.ceil(y0 * 2) / 2, y1, 0.5):
        parts.append(f'<text x="{L - 6}" y="{py(tick) + 3:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{tick:g}</text>')
    for x, m, a, b in zip(lx, means, lo, hi):
        parts.append(f'<path d="M{px(x):.2f},{py(np.log10(a)):.2f} V{py(np.log10(b)):.2f}" stroke="steelblue"/>')
        parts.append(f'<circle cx="{px(x):.2f}" cy="{py(np.log10(m)):.2f}" r="4" fill="steelblue"/>')
    if fit_ is not None:
        ya = (fit_.intercept + fit_.slope * lx.min() * math.log(10)) / math.log(10)
        yb = (fit_.intercept + fit_.slope * lx.max() * math.log(10)) / math.log(10)
        parts.append(f'<line x1="{px(lx.min()):.2f}" y1="{py(ya):.2f}" x2="{px(lx.max()):.2f}" y2="{py(yb):.2f}" '
                     f'stroke="crimson" stroke-dasharray="6,4"/>')
        parts.append(f'<text x="{W - R - 4}" y="{T + 14}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="12">slope {fit_.slope:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_outputs(report: RateReport, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [out_dir / "results.csv", out_dir / "rates.json"]
        write_csv(report.trials, written[0])
        written[1].write_text(json.dumps(rates_document(report), indent=2, sort_keys=True) + "\n")
        for (variant, K), fits in report.rates.items():
            metric = report.plotted.get(variant, "loss_l2")
            ns = sorted(n for v, k, n in report.summary if (v, k) == (variant, K))
            stats = [report.summary[(variant, K, n)][metric] for n in ns]
            if not ns or any(m <= 0 for m, _ in stats):
                continue
            svg = svg_loglog(f"{variant}, K={K}", ns, [m for m, _ in stats], [s for _, s in stats],
                             fits.get(metric), metric)
            path = out_dir / f"{variant}_K{K}.svg"
            path.write_text(svg)
            written.append(path)
    except OSError as exc:
        raise OSError(f"cannot write outputs under {out_dir}: {exc}") from exc
    return written
