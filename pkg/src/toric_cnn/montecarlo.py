"""Monte-Carlo harnesses: logical error sweeps, memory times, scaling fits.

Trials are grouped into fixed-size chunks. Each chunk draws from its own
``SeedSequence`` keyed by (seed, L, p, chunk), so aggregate counts do not
depend on how many workers run the chunks.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from statsmodels.stats.proportion import proportion_confint

from .decoder import DecoderConfig, decode_batch, noisy_round_batch
from .lattice import LatticeGeometry
from .nn import Network, check_decoder_compat
from .toric import boundary, logical_class_bits

WORKERS_ENV = "TORIC_CNN_WORKERS"
CHUNK = 64

SWEEP_HEADER = ["L", "p", "trials", "failures", "p_bar", "ci_lo", "ci_hi"]
MEMORY_HEADER = ["L", "p", "rounds", "censored"]
FIT_HEADER = ["parameter", "value", "stderr"]


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1")
    return n


def _p_key(p: float) -> int:
    return int(round(p * 1e9))


def chunk_seed(seed: int, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *key])


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def wilson_interval(failures: int, trials: int, alpha: float = 0.05) -> tuple[float, float]:
    lo, hi = proportion_confint(failures, trials, alpha=alpha, method="wilson")
    return float(lo), float(hi)


# -- noiseless sweep --------------------------------------------------------------

@dataclass
class SweepConfig:
    dim: int
    sizes: list[int]
    ps: list[float]
    trials: int
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    seed: int = 0
    chunk: int = CHUNK

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.sizes or not self.ps:
            raise ValueError("need at least one L and one p")
        for p in self.ps:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p={p} is not a probability")


@dataclass
class SweepRow:
    L: int
    p: float
    trials: int
    failures: int

    @property
    def p_bar(self) -> float:
        return self.failures / self.trials

    def ci(self, alpha: float = 0.05) -> tuple[float, float]:
        return wilson_interval(self.failures, self.trials, alpha)


def _sweep_chunk(task) -> int:
    net, geom, p, n, cfg, seq = task
    rng = np.random.default_rng(seq)
    errors = (rng.random((n,) + geom.shape(2)) < p).astype(np.uint8)
    return sum(o.failed for o in decode_batch(net, geom, errors, cfg))


def count_failures(net: Network, geom: LatticeGeometry, p: float, trials: int, cfg: DecoderConfig,
                   seed: int, chunk: int = CHUNK, workers: int | None = None) -> int:
    """Failures (logical or timeout) of the model-(a) pipeline over ``trials`` errors."""
    tasks = []
    for k, start in enumerate(range(0, trials, chunk)):
        n = min(chunk, trials - start)
        tasks.append((net, geom, p, n, cfg, chunk_seed(seed, geom.size, _p_key(p), k)))
    return int(sum(_map(_sweep_chunk, tasks, workers or worker_count())))


def run_noiseless_sweep(net: Network, cfg: SweepConfig, workers: int | None = None) -> list[SweepRow]:
    check_decoder_compat(net, cfg.dim)
    rows = []
    for L in cfg.sizes:
        geom = LatticeGeometry(cfg.dim, L)
        for p in cfg.ps:
            f = count_failures(net, geom, p, cfg.trials, cfg.decoder, cfg.seed, cfg.chunk, workers)
            rows.append(SweepRow(L, float(p), cfg.trials, f))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        lo, hi = r.ci()
        w.writerow([r.L, repr(r.p), r.trials, r.failures, repr(r.p_bar), repr(lo), repr(hi)])
    return buf.getvalue()


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        return [SweepRow(int(r["L"]), float(r["p"]), int(r["trials"]), int(r["failures"]))
                for r in csv.DictReader(fh)]


# -- memory time ------------------------------------------------------------------

@dataclass
class MemoryConfig:
    dim: int
    sizes: list[int]
    p: float
    q: float | None = None
    runs: int = 64
    round_cap: int = 10_000
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(mode="noisy"))
    assess: DecoderConfig = field(default_factory=DecoderConfig)
    seed: int = 0
    chunk: int = CHUNK

    def __post_init__(self):
        if self.q is None:
            self.q = self.p
        if self.runs < 1 or self.round_cap < 1:
            raise ValueError("runs and round cap must be >= 1")


@dataclass
class MemoryTimeRecord:
    L: int
    p: float
    rounds: int
    censored: bool

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("a memory-time record covers at least one round")


def _assess(assess_net, geom, errors, cfg) -> np.ndarray:
    """Would the model-(a) decoder fail on each state? Runs on copies."""
    failed = np.zeros(len(errors), dtype=bool)
    synd = boundary(geom, errors).reshape(len(errors), -1).any(axis=1)
    clean = ~synd
    if clean.any():
        failed[clean] = logical_class_bits(geom, errors[clean]).any(axis=1)
    if synd.any():
        idx = np.nonzero(synd)[0]
        out = decode_batch(assess_net, geom, errors[idx].copy(), cfg)
        failed[idx] = [o.failed for o in out]
    return failed


def _memory_chunk(task):
    net, assess_net, geom, cfg, n, seq = task
    rng = np.random.default_rng(seq)
    errors = np.zeros((n,) + geom.shape(2), dtype=np.uint8)
    rounds = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for t in range(1, cfg.round_cap + 1):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        # every run consumes the same random stream shape, dead or alive
        inject = (rng.random(errors.shape) < cfg.p).astype(np.uint8)
        noise = (rng.random((n,) + geom.shape(1)) < cfg.q).astype(np.uint8)
        e = errors[idx] ^ inject[idx]
        faulty = boundary(geom, e) ^ noise[idx]
        e, _, _ = noisy_round_batch(net, geom, e, faulty, cfg.decoder)
        errors[idx] = e
        rounds[idx] = t
        failed = _assess(assess_net, geom, e, cfg.assess)
        alive[idx[failed]] = False
    return [(int(r), bool(a)) for r, a in zip(rounds, alive)]


def run_memory_time(net: Network, assess_net: Network, cfg: MemoryConfig,
                    workers: int | None = None) -> list[MemoryTimeRecord]:
    """Rounds until the model-(a) decoder would fail, per run.

    Each round injects Bernoulli(p) face errors, measures the syndrome with
    Bernoulli(q) read-out flips and applies one single-shot decode. A run
    reaching the round cap without failure is censored.
    """
    check_decoder_compat(net, cfg.dim)
    check_decoder_compat(assess_net, cfg.dim)
    records = []
    for L in cfg.sizes:
        geom = LatticeGeometry(cfg.dim, L)
        tasks = []
        for k, start in enumerate(range(0, cfg.runs, cfg.chunk)):
            n = min(cfg.chunk, cfg.runs - start)
            tasks.append((net, assess_net, geom, cfg, n,
                          chunk_seed(cfg.seed, L, _p_key(cfg.p), _p_key(cfg.q), k)))
        for chunk in _map(_memory_chunk, tasks, workers or worker_count()):
            records.extend(MemoryTimeRecord(L, cfg.p, r, c) for r, c in chunk)
    return records


def memory_csv(records: list[MemoryTimeRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MEMORY_HEADER)
    for r in records:
        w.writerow([r.L, repr(r.p), r.rounds, int(r.censored)])
    return buf.getvalue()


@dataclass
class CensoredEstimate:
    mean: float
    ci_lo: float
    ci_hi: float
    failures: int
    total_time: float
    defined: bool = True


def censored_exponential_mean(records, confidence: float = 0.8) -> CensoredEstimate:
    """Exponential MLE under right censoring, with the chi-squared pivot CI.

    ``records`` holds MemoryTimeRecord objects or (time, censored) pairs.
    T_hat = total time / failures and 2 r T_hat / T ~ chi2(2 r).
    """
    pairs = [(r.rounds, r.censored) if isinstance(r, MemoryTimeRecord) else (r[0], bool(r[1]))
             for r in records]
    total = float(sum(t for t, _ in pairs))
    r = sum(1 for _, c in pairs if not c)
    if r == 0:
        return CensoredEstimate(float("inf"), float("nan"), float("inf"), 0, total, defined=False)
    t_hat = total / r
    alpha = 1.0 - confidence
    lo = 2 * total / stats.chi2.ppf(1 - alpha / 2, 2 * r)
    hi = 2 * total / stats.chi2.ppf(alpha / 2, 2 * r)
    return CensoredEstimate(t_hat, float(lo), float(hi), r, total)


# -- finite-size scaling ------------------------------------------------------------

FIT_PARAMS = ("p_c", "nu", "A", "B", "C")


@dataclass
class ScalingFit:
    p_c: float
    nu: float
    A: float
    B: float
    C: float
    covariance: np.ndarray
    residual: float
    unidentifiable: bool = False

    def stderr(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.sqrt(np.diag(self.covariance))

    def values(self) -> tuple[float, ...]:
        return (self.p_c, self.nu, self.A, self.B, self.C)


def scaling_model(p, L, p_c, nu, A, B, C):
    x = (np.asarray(p) - p_c) * np.asarray(L, dtype=float) ** (1.0 / nu)
    return A + B * x + C * x * x


def _linear_part(p, L, w, y, p_c, nu):
    x = (p - p_c) * L ** (1.0 / nu)
    design = np.stack([np.ones_like(x), x, x * x], axis=1) * w[:, None]
    coef, *_ = np.linalg.lstsq(design, y * w, rcond=None)
    return coef


def fit_scaling(rows, p_window: tuple[float, float] | None = None, sigma=None,
                pc_grid=None, nu0: float = 1.0) -> ScalingFit:
    """Fit P = A + B x + C x^2 with x = (p - p_c) L^(1/nu).

    ``rows`` are SweepRow objects or (L, p, p_bar) triples. Weights use the
    binomial standard error when trial counts are known. The nonlinear pair
    (p_c, nu) is started from a grid of p_c values with the linear
    coefficients projected out, then all five parameters are refined jointly.
    """
    L, p, y, n = [], [], [], []
    for r in rows:
        if isinstance(r, SweepRow):
            L.append(r.L), p.append(r.p), y.append(r.p_bar), n.append(r.trials)
        else:
            L.append(r[0]), p.append(r[1]), y.append(r[2]), n.append(None)
    L, p, y = np.array(L, float), np.array(p, float), np.array(y, float)
    keep = np.ones(len(p), dtype=bool)
    if p_window is not None:
        keep = (p >= p_window[0] - 1e-12) & (p <= p_window[1] + 1e-12)
    L, p, y = L[keep], p[keep], y[keep]
    if len(np.unique(L)) < 2:
        raise ValueError("scaling fit needs at least two system sizes")
    if len(np.unique(p)) < 3:
        raise ValueError("scaling fit needs at least three p values")
    if sigma is not None:
        s = np.asarray(sigma, float)[keep]
    elif all(t is not None for t in n):
        trials = np.array(n, float)[keep]
        s = np.sqrt(np.maximum(y * (1 - y), 1.0 / trials) / trials)
    else:
        s = np.ones_like(y)
    w = 1.0 / s

    if np.ptp(y) < 1e-12:
        cov = np.full((5, 5), np.inf)
        return ScalingFit(float(np.mean(p)), nu0, float(y[0]), 0.0, 0.0, cov, 0.0, unidentifiable=True)

    def reduced(theta):
        p_c, log_nu = theta
        nu = np.exp(log_nu)
        coef = _linear_part(p, L, w, y, p_c, nu)
        return (scaling_model(p, L, p_c, nu, *coef) - y) * w

    grid = np.linspace(p.min(), p.max(), 9) if pc_grid is None else np.asarray(pc_grid)
    best = None
    for pc0 in grid:
        for nu_start in (0.5 * nu0, nu0, 2 * nu0):
            try:
                sol = optimize.least_squares(reduced, [pc0, np.log(nu_start)], method="lm")
            except ValueError:
                continue
            if np.isfinite(sol.cost) and (best is None or sol.cost < best.cost):
                best = sol
    p_c, nu = best.x[0], float(np.exp(best.x[1]))
    coef = _linear_part(p, L, w, y, p_c, nu)

    def full(theta):
        return (scaling_model(p, L, *theta) - y) * w

    sol = optimize.least_squares(full, [p_c, nu, *coef], method="lm")
    theta = sol.x
    dof = max(1, len(y) - 5)
    chi2 = float(np.sum(sol.fun ** 2))
    jtj = sol.jac.T @ sol.jac
    unident = False
    try:
        cov = np.linalg.inv(jtj)
        if sigma is None and not all(t is not None for t in n):
            cov = cov * chi2 / dof
        unident = not np.all(np.isfinite(np.diag(cov))) or np.linalg.cond(jtj) > 1e14
    except np.linalg.LinAlgError:
        cov = np.full((5, 5), np.inf)
        unident = True
    if abs(theta[3]) < 1e-9 and abs(theta[4]) < 1e-9:
        unident = True
    return ScalingFit(*(float(v) for v in theta), covariance=cov, residual=chi2, unidentifiable=unident)


def fit_csv(fit: ScalingFit) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIT_HEADER)
    for name, value, err in zip(FIT_PARAMS, fit.values(), fit.stderr()):
        w.writerow([name, repr(value), repr(float(err))])
    w.writerow(["residual", repr(fit.residual), ""])
    w.writerow(["unidentifiable", int(fit.unidentifiable), ""])
    return buf.getvalue()
