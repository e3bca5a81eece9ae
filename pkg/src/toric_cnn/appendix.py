"""Locality experiments: nearest-neighbour toy model, path-count variance,
aligned/reversed generalization and sensitivity decay of decoder nets.

The small networks here are non-periodic "valid" convolution stacks with
kernel width 3 that shrink the input to one output. They are separate from
:mod:`toric_cnn.nn`, which only handles periodic lattices.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .lattice import LatticeGeometry
from .nn import Network, exponential_schedule, sgd_step


# -- nearest-neighbour toy model -------------------------------------------------

@dataclass(frozen=True)
class ToyLatticeConfig:
    L: int = 50
    p: float = 0.05
    N: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if int(np.floor(self.p * self.L ** 2)) < 1:
            raise ValueError("floor(p L^2) must be >= 1")
        if self.N < 1:
            raise ValueError("database size must be >= 1")

    @property
    def flips(self) -> int:
        return int(np.floor(self.p * self.L ** 2))


def _random_subsets(rng, count: int, cells: int, k: int) -> np.ndarray:
    """(count, k) indices of uniformly random k-subsets of range(cells)."""
    keys = rng.random((count, cells), dtype=np.float32)
    return np.argpartition(keys, k - 1, axis=1)[:, :k]


def toy_overlap_trial(cfg: ToyLatticeConfig, rng, include_exact: bool = False) -> dict:
    cells = cfg.L ** 2
    k = cfg.flips
    target = np.zeros(cells, dtype=bool)
    target[rng.choice(cells, size=k, replace=False)] = True
    database = _random_subsets(rng, cfg.N, cells, k)
    if include_exact:
        database[0] = np.nonzero(target)[0]
    overlaps = target[database].sum(axis=1)
    best = int(np.argmax(overlaps))
    entry = np.zeros(cells, dtype=bool)
    entry[database[best]] = True
    return {
        "max_overlap": int(overlaps[best]),
        "weight_before": k,
        "weight_after": int((target ^ entry).sum()),
        "mean_overlap": float(overlaps.mean()),
        "var_overlap": float(overlaps.var()),
    }


def nn_toy_overlap_experiment(cfg: ToyLatticeConfig, repetitions: int = 100,
                              include_exact: bool = False) -> dict:
    """Best-overlap lookup against a random database, repeated.

    Reports the mean and max best-entry overlap, the mean weight after flipping
    the best entry, and the pooled random-overlap moments (mean L^2 p^2).
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    trials = [toy_overlap_trial(cfg, rng, include_exact) for _ in range(repetitions)]
    return {
        "repetitions": repetitions,
        "flips": cfg.flips,
        "mean_max_overlap": float(np.mean([t["max_overlap"] for t in trials])),
        "max_max_overlap": int(max(t["max_overlap"] for t in trials)),
        "mean_weight_after": float(np.mean([t["weight_after"] for t in trials])),
        "mean_random_overlap": float(np.mean([t["mean_overlap"] for t in trials])),
        "var_random_overlap": float(np.mean([t["var_overlap"] for t in trials])),
        "expected_random_overlap": cfg.L ** 2 * cfg.p ** 2,
        "trials": trials,
    }


# -- path counting ---------------------------------------------------------------

@dataclass
class LocalNetSpec:
    """Kernel-3 'valid' stack of depth m (input layer included).

    ``dims`` is 1 or 2; the input width is n = 2m - 1 so the output is a
    single neuron. ``channels`` is the hidden width.
    """
    m: int = 4
    dims: int = 1
    channels: int = 1
    shared: bool = False
    activation: str = "none"
    sigma: float = 0.1

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least one weight layer (m >= 2)")
        if self.dims not in (1, 2):
            raise ValueError("local nets are 1D or 2D")
        if self.activation not in ("none", "relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n(self) -> int:
        return 2 * self.m - 1

    @property
    def widths(self) -> list[int]:
        return [self.n - 2 * l for l in range(self.m)]

    @property
    def layer_channels(self) -> list[int]:
        return [1] + [self.channels] * (self.m - 2) + [1]


def count_paths(m: int, position: int, n: int | None = None) -> int:
    """Paths from input ``position`` to the single output of a depth-m 1D stack.

    Equals the coefficient of z^position in (1 + z + z^2)^(m-1).
    """
    n = 2 * m - 1 if n is None else n
    if n != 2 * m - 1:
        raise ValueError(f"a depth-{m} stack contracts exactly {2 * m - 1} inputs")
    if not 0 <= position < n:
        return 0
    counts = np.zeros(n, dtype=object)
    counts[position] = 1
    for _ in range(m - 1):
        counts = counts[:-2] + counts[1:-1] + counts[2:]
    return int(counts[0])


def enumerate_paths(m: int, position: int) -> list[tuple[int, ...]]:
    """Brute force: every position sequence from the input to the output."""
    n = 2 * m - 1
    if not 0 <= position < n:
        return []
    paths = []
    for steps in itertools.product((0, 1, 2), repeat=m - 1):
        # neuron j in layer l+1 reads inputs j, j+1, j+2 of layer l
        pos = [position]
        ok = True
        for s in steps:
            nxt = pos[-1] - s
            if nxt < 0 or nxt > len_layer(m, len(pos)) - 1:
                ok = False
                break
            pos.append(nxt)
        if ok and pos[-1] == 0:
            paths.append(tuple(pos))
    return paths


def len_layer(m: int, layer: int) -> int:
    return 2 * m - 1 - 2 * layer


# -- small valid-convolution networks ----------------------------------------------

@dataclass
class LocalNet:
    spec: LocalNetSpec
    weights: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, spec: LocalNetSpec, rng) -> LocalNet:
        ws = []
        chans = spec.layer_channels
        kshape = (3,) * spec.dims
        for l in range(spec.m - 1):
            out_w = spec.widths[l + 1]
            if spec.shared:
                shape = kshape + (chans[l], chans[l + 1])
            else:
                shape = (out_w,) * spec.dims + kshape + (chans[l], chans[l + 1])
            ws.append(rng.normal(0.0, spec.sigma, size=shape))
        return cls(spec, ws)

    def _patches(self, x):
        # x: (B, *spatial, c) -> (B, *out_spatial, c, *kernel)
        axes = tuple(range(1, 1 + self.spec.dims))
        return sliding_window_view(x, (3,) * self.spec.dims, axis=axes)

    def _layer(self, x, w):
        p = self._patches(x)
        if self.spec.dims == 1:
            eq = "bxck,kcd->bxd" if self.spec.shared else "bxck,xkcd->bxd"
        else:
            eq = "bxyckl,klcd->bxyd" if self.spec.shared else "bxyckl,xyklcd->bxyd"
        return np.einsum(eq, p, w, optimize=True)

    def _act(self, z):
        if self.spec.activation == "relu":
            return np.maximum(z, 0.0)
        if self.spec.activation == "tanh":
            return np.tanh(z)
        return z

    def _act_grad(self, z, a):
        if self.spec.activation == "relu":
            return (z > 0).astype(float)
        if self.spec.activation == "tanh":
            return 1.0 - a * a
        return np.ones_like(z)

    def forward(self, x, keep=False):
        """x: (B, *spatial) inputs. Returns the pre-tanh output (B,)."""
        a = x[..., None].astype(np.float64)
        cache = [(None, a)]
        for l, w in enumerate(self.weights):
            z = self._layer(a, w)
            a = z if l == len(self.weights) - 1 else self._act(z)
            cache.append((z, a))
        out = a.reshape(len(x))
        return (out, cache) if keep else out

    def coefficients(self) -> np.ndarray:
        """Exact linear coefficients a_k (only meaningful without activation)."""
        n = self.spec.n
        basis = np.eye(n ** self.spec.dims).reshape((-1,) + (n,) * self.spec.dims)
        return self.forward(basis).reshape((n,) * self.spec.dims)

    def backward(self, cache, dout):
        """Gradients of sum(dout * output) w.r.t. every weight tensor."""
        grads = [None] * len(self.weights)
        g = dout.reshape((len(dout),) + (1,) * self.spec.dims + (1,))
        for l in range(len(self.weights) - 1, -1, -1):
            z, a = cache[l + 1]
            if l != len(self.weights) - 1:
                g = g * self._act_grad(z, a)
            prev = cache[l][1]
            p = self._patches(prev)
            w = self.weights[l]
            if self.spec.dims == 1:
                if self.spec.shared:
                    grads[l] = np.einsum("bxck,bxd->kcd", p, g, optimize=True)
                    dp = np.einsum("bxd,kcd->bxck", g, w, optimize=True)
                else:
                    grads[l] = np.einsum("bxck,bxd->xkcd", p, g, optimize=True)
                    dp = np.einsum("bxd,xkcd->bxck", g, w, optimize=True)
                dprev = np.zeros_like(prev)
                for k in range(3):
                    dprev[:, k:k + dp.shape[1]] += dp[..., k]
            else:
                if self.spec.shared:
                    grads[l] = np.einsum("bxyckl,bxyd->klcd", p, g, optimize=True)
                    dp = np.einsum("bxyd,klcd->bxyckl", g, w, optimize=True)
                else:
                    grads[l] = np.einsum("bxyckl,bxyd->xyklcd", p, g, optimize=True)
                    dp = np.einsum("bxyd,xyklcd->bxyckl", g, w, optimize=True)
                dprev = np.zeros_like(prev)
                h, wd = dp.shape[1:3]
                for k in range(3):
                    for j in range(3):
                        dprev[:, k:k + h, j:j + wd] += dp[..., k, j]
            g = dprev
        return grads


def path_sum_coefficients(net: LocalNet) -> np.ndarray:
    """a_k = sum over paths of weight products, for 1D single-channel nets."""
    spec = net.spec
    if spec.dims != 1 or spec.channels != 1:
        raise ValueError("path sums are enumerated for 1D single-channel nets")
    out = np.zeros(spec.n)
    for k in range(spec.n):
        for path in enumerate_paths(spec.m, k):
            prod = 1.0
            for l in range(spec.m - 1):
                j = path[l + 1]
                off = path[l] - j
                w = net.weights[l]
                prod *= w[off, 0, 0] if spec.shared else w[j, off, 0, 0]
            out[k] += prod
    return out


def variance_vs_paths_experiment(spec: LocalNetSpec, trials: int = 600, seed: int = 0) -> dict:
    """Empirical variance of each input's linear coefficient over random inits."""
    if spec.activation != "none":
        raise ValueError("the path-count argument needs a linear network")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    coeffs = np.array([LocalNet.init(spec, rng).coefficients() for _ in range(trials)])
    var = coeffs.var(axis=0, ddof=1)
    counts = np.array([count_paths(spec.m, k) for k in range(spec.n)], dtype=float)
    if spec.dims == 2:
        counts = np.outer(counts, counts)
    scale = float(spec.channels ** max(0, spec.m - 2) * spec.sigma ** (2 * (spec.m - 1)))
    center = (spec.n // 2,) * spec.dims
    corner = (0,) * spec.dims
    # every corner has a single path; pooling them tames the heavy-tailed
    # product-of-normals estimate
    corners = [tuple(c) for c in itertools.product((0, spec.n - 1), repeat=spec.dims)]
    pooled = float(np.mean([var[c] for c in corners]))
    return {
        "variance": var,
        "paths": counts,
        "predicted": counts * scale,
        "ratio_center_corner": float(var[center] / pooled),
        "ratio_center_first_corner": float(var[center] / var[corner]),
        "center_samples": coeffs[(slice(None),) + center],
    }


# -- aligned / reversed generalization ----------------------------------------------

@dataclass
class AlignedConfig:
    n: int = 7
    channels: int = 10
    noisy: bool = False
    sigma: float = 0.1
    lr0: float = 0.05
    gamma: float = 0.999
    batch: int = 100
    cost_target: float = 0.02
    max_steps: int = 20_000
    eval_every: int = 50
    eval_batch: int = 50
    shared: bool = False

    @property
    def m(self) -> int:
        return (self.n + 1) // 2

    def spec(self) -> LocalNetSpec:
        return LocalNetSpec(m=self.m, dims=2, channels=self.channels, shared=self.shared,
                            activation="relu" if self.noisy else "none", sigma=self.sigma)


def aligned_batch(cfg: AlignedConfig, rng, size: int, reversed_: bool = False):
    y = rng.choice([-1.0, 1.0], size=size)
    if cfg.noisy:
        x = rng.choice([-1.0, 1.0], size=(size, cfg.n, cfg.n))
    else:
        x = np.zeros((size, cfg.n, cfg.n))
    c = cfg.n // 2
    x[:, c, c] = y
    x[:, 0, 0] = -y if reversed_ else y
    return x, y


def _accuracy(net, cfg, rng):
    xa, ya = aligned_batch(cfg, rng, cfg.eval_batch)
    xr, yr = aligned_batch(cfg, rng, cfg.eval_batch, reversed_=True)
    aligned = float(np.mean(np.sign(np.tanh(net.forward(xa))) == ya))
    # on reversed inputs, score agreement with the corner bit (= -y)
    reversed_corner = float(np.mean(np.sign(np.tanh(net.forward(xr))) == -yr))
    return aligned, reversed_corner


def aligned_reversed_run(cfg: AlignedConfig, seed: int) -> dict:
    """Train one locally connected net on aligned inputs, probe reversed ones."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    net = LocalNet.init(cfg.spec(), rng)
    history = []
    converged = False
    cost = float("nan")
    step = 0
    for step in range(1, cfg.max_steps + 1):
        x, y = aligned_batch(cfg, rng, cfg.batch)
        out, cache = net.forward(x, keep=True)
        t = np.tanh(out)
        cost = float(np.mean((y - t) ** 2))
        if not np.isfinite(cost):
            break
        if cost < cfg.cost_target:
            converged = True
            break
        dout = -2.0 * (y - t) * (1.0 - t * t) / len(y)
        grads = net.backward(cache, dout)
        sgd_step(net.weights, grads, exponential_schedule(cfg.lr0, cfg.gamma, step - 1))
        if cfg.eval_every and step % cfg.eval_every == 0:
            history.append((step, *_accuracy(net, cfg, rng)))
    probe = np.array([[1.0, -1.0], [-1.0, 1.0]])  # (center, corner)
    x = np.zeros((2, cfg.n, cfg.n))
    c = cfg.n // 2
    x[:, c, c], x[:, 0, 0] = probe[:, 0], probe[:, 1]
    if cfg.noisy:
        outs = []
        xr, yr = aligned_batch(cfg, rng, cfg.eval_batch, reversed_=True)
        out = np.rint(np.tanh(net.forward(xr)))
        center_frac = float(np.mean(out == yr))
        side = "center" if center_frac > 0.5 else "corner"
        outs = out
    else:
        out = np.rint(np.tanh(net.forward(x)))
        if np.all(out == probe[:, 0]):
            side = "center"
        elif np.all(out == probe[:, 1]):
            side = "corner"
        else:
            side = "mixed"
        center_frac = float(np.mean(out == probe[:, 0]))
    aligned_acc, _ = _accuracy(net, cfg, rng)
    return {"seed": seed, "converged": converged, "steps": step, "cost": cost, "side": side,
            "center_fraction": center_frac, "aligned_accuracy": aligned_acc, "history": history}


def aligned_reversed_experiment(cfg: AlignedConfig, runs: int = 20, seed: int = 0) -> dict:
    """Repeat the run; non-converged runs are excluded from the tally and listed."""
    results = [aligned_reversed_run(cfg, seed * 1000 + r) for r in range(runs)]
    kept = [r for r in results if r["converged"]]
    return {
        "runs": results,
        "converged": len(kept),
        "center": sum(r["side"] == "center" for r in kept),
        "excluded": [r["seed"] for r in results if not r["converged"]],
    }


# -- sensitivity of a decoder net --------------------------------------------------

def _periodic_l1(geom: LatticeGeometry, center) -> np.ndarray:
    grids = np.indices(geom.site_shape)
    total = np.zeros(geom.site_shape, dtype=np.int64)
    for a in range(geom.dim):
        d = np.abs(grids[a] - center[a]) % geom.size
        total += np.minimum(d, geom.size - d)
    return total


def sensitivity_vs_distance(net: Network, size: int, distances=None, reps: int = 20,
                            p: float = 0.17, seed: int = 0, channel: int = 0) -> dict:
    """Mean |change| of the center face's pre-softmax score per flipped input bit.

    For each L1 distance (between base vertices, periodic) a random input
    edge at that distance is flipped on a fresh random syndrome, ``reps``
    times. Distances beyond the receptive field give exact zeros.
    """
    from .toric import boundary

    geom = LatticeGeometry(net.dim, size)
    center = (size // 2,) * geom.dim
    dist = _periodic_l1(geom, center)
    if distances is None:
        distances = list(range(int(dist.max()) + 1))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    out = {}
    for d in distances:
        sites = np.argwhere(dist == d)
        if len(sites) == 0:
            continue
        deltas = []
        for _ in range(reps):
            e = (rng.random(geom.shape(2)) < p).astype(np.uint8)
            s = boundary(geom, e).astype(np.float64)
            site = tuple(sites[rng.integers(len(sites))])
            bit = site + (int(rng.integers(geom.dim)),)
            s2 = s.copy()
            s2[bit] = 1.0 - s2[bit]
            y = net.forward(np.stack([s, s2]))
            deltas.append(abs(float(y[1][center + (channel,)] - y[0][center + (channel,)])))
        out[d] = float(np.mean(deltas))
    return {"distances": list(out), "sensitivity": [out[d] for d in out],
            "receptive_radius": net.receptive_radius}


@lru_cache(maxsize=None)
def trinomial_row(m: int) -> tuple[int, ...]:
    return tuple(count_paths(m, k) for k in range(2 * m - 1))
