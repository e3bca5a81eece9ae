"""Supervised training of decoder networks.

Inputs are (possibly corrupted) syndromes; targets put ``1/N`` on each of the
``N`` errored faces so that they match the global softmax normalization.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .lattice import LatticeGeometry, to_canonical
from .nn import AdamState, Network, adam_step, decoder_network, softmax_cross_entropy
from .toric import boundary

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "train_cost", "val_cost", "lr", "seconds"]


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainingHyper:
    lr: float = 1e-3
    decay: float = 0.5
    patience: int = 2
    batch_size: int = 64
    val_fraction: float = 0.1
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("learning rate must be positive and batch size >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in (0, 1)")


def default_p_range(model: str, dim: int) -> tuple[float, float]:
    if dim == 3:
        return (0.17, 0.17)
    return (0.03, 0.07) if model == "a" else (0.02, 0.03)


@dataclass
class TrainingRunConfig:
    model: str = "a"
    dim: int = 4
    size: int = 4
    hidden: int | None = None
    p_range: tuple[float, float] | None = None
    q: float | None = None
    samples: int | None = None
    epochs: int = 10
    sides: tuple[int, ...] = (3, 1, 1)
    hyper: TrainingHyper = field(default_factory=TrainingHyper)
    seed: int = 0

    def __post_init__(self):
        if self.model not in ("a", "b"):
            raise ValueError(f"model must be 'a' or 'b', got {self.model!r}")
        if self.hidden is None:
            self.hidden = 15 if self.model == "a" else 20
        if self.p_range is None:
            self.p_range = default_p_range(self.model, self.dim)
        self.p_range = tuple(float(x) for x in self.p_range)
        if self.q is None:
            self.q = 0.025 if self.model == "b" else 0.0
        if self.samples is None:
            self.samples = 200_000 if self.dim == 4 else 100_000
        lo, hi = self.p_range
        if not 0.0 <= lo <= hi <= 1.0 or not 0.0 <= self.q <= 1.0:
            raise ValueError(f"invalid noise range p={self.p_range}, q={self.q}")
        if isinstance(self.hyper, dict):
            self.hyper = TrainingHyper(**self.hyper)
        self.sides = tuple(self.sides)

    @property
    def geom(self) -> LatticeGeometry:
        return LatticeGeometry(self.dim, self.size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p_range"] = list(self.p_range)
        d["sides"] = list(self.sides)
        return d


@dataclass
class Dataset:
    syndromes: np.ndarray  # (n, L.., D) uint8, fed to the network
    errors: np.ndarray  # (n, L.., C) uint8, the true errors
    p: np.ndarray  # (n,) error rate drawn per sample

    def __len__(self) -> int:
        return len(self.p)

    def subset(self, idx) -> Dataset:
        return Dataset(self.syndromes[idx], self.errors[idx], self.p[idx])

    def targets(self, idx=slice(None)) -> np.ndarray:
        return make_targets(self.errors[idx])


def make_targets(errors: np.ndarray) -> np.ndarray:
    """1/N on errored faces, per sample along axis 0."""
    e = errors.astype(np.float64)
    n = e.reshape(len(e), -1).sum(axis=1)
    if (n == 0).any():
        raise ValueError("a target needs at least one errored face")
    return e / n.reshape((-1,) + (1,) * (e.ndim - 1))


def generate_dataset(cfg: TrainingRunConfig, count: int, rng: np.random.Generator,
                     chunk: int = 1024) -> Dataset:
    """Sample (syndrome, error) pairs with p uniform on the configured range.

    Draws with no errored face are resampled. With q > 0 the syndrome is the
    corrupted measurement while the error stays the clean truth.
    """
    geom = cfg.geom
    lo, hi = cfg.p_range
    synd = np.empty((count,) + geom.shape(1), dtype=np.uint8)
    errs = np.empty((count,) + geom.shape(2), dtype=np.uint8)
    ps = np.empty(count)
    bshape = (1,) * (geom.dim + 1)
    for start in range(0, count, chunk):
        n = min(chunk, count - start)
        p = rng.uniform(lo, hi, size=n)
        e = (rng.random((n,) + geom.shape(2)) < p.reshape((n,) + bshape)).astype(np.uint8)
        empty = np.nonzero(e.reshape(n, -1).sum(axis=1) == 0)[0]
        while empty.size:
            e[empty] = (rng.random((empty.size,) + geom.shape(2))
                        < p[empty].reshape((empty.size,) + bshape)).astype(np.uint8)
            empty = empty[e[empty].reshape(empty.size, -1).sum(axis=1) == 0]
        s = boundary(geom, e)
        if cfg.q > 0:
            s ^= (rng.random(s.shape) < cfg.q).astype(np.uint8)
        synd[start:start + n] = s
        errs[start:start + n] = e
        ps[start:start + n] = p
    return Dataset(synd, errs, ps)


def uniform_baseline(geom: LatticeGeometry) -> float:
    """Cost of predicting the uniform distribution over all faces."""
    return float(np.log(geom.n_faces))


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def validate(net: Network, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean reduced cross-entropy and top-N hit rate on ``data``.

    A hit means the errored face with the most violated boundary edges ranks
    within the top N network scores, N being the number of errored faces.
    """
    if len(data) == 0:
        raise ValueError("validation needs at least one sample")
    geom = LatticeGeometry(net.dim, data.errors.shape[1])
    total = 0.0
    hits = 0
    for sl in _batches(len(data), batch_size):
        x = data.syndromes[sl].astype(np.float64)
        out = net.forward(x)
        cost, _ = softmax_cross_entropy(out, data.targets(sl))
        total += cost * x.shape[0]
        hits += int(_top_hits(geom, out, data.syndromes[sl], data.errors[sl]).sum())
    return total / len(data), hits / len(data)


def _top_hits(geom, out, synd, errors) -> np.ndarray:
    from .lattice import face_edge_table

    table = face_edge_table(geom.dim, geom.size)
    scores = to_canonical(out, geom)
    err = to_canonical(errors, geom)
    s = to_canonical(synd, geom)
    support = s[:, table].sum(axis=2).astype(np.int64)  # violated edges per face
    support = np.where(err > 0, support, -1)
    probe = np.argmax(support, axis=1)
    n = err.sum(axis=1)
    rank = (scores > scores[np.arange(len(scores)), probe][:, None]).sum(axis=1)
    return rank < n


@dataclass
class TrainingResult:
    net: Network
    log: list[dict]
    best_val: float
    config: TrainingRunConfig


def train(cfg: TrainingRunConfig, data: Dataset | None = None, log_path=None,
          shuffle_targets: bool = False) -> TrainingResult:
    """Adam training with patience-based learning-rate decay.

    Returns the network with the best validation cost. ``shuffle_targets``
    permutes targets across training samples (negative control).
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    if data is None:
        data = generate_dataset(cfg, cfg.samples, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
    n_val = max(1, int(round(len(data) * cfg.hyper.val_fraction)))
    train_set = data.subset(slice(0, len(data) - n_val))
    val_set = data.subset(slice(len(data) - n_val, len(data)))
    if shuffle_targets:
        perm = rng.permutation(len(train_set))
        train_set = Dataset(train_set.syndromes, train_set.errors[perm], train_set.p)

    net = decoder_network(cfg.dim, cfg.hidden, rng, sides=cfg.sides)
    net.metadata["training"] = cfg.to_dict()
    state = AdamState(lr=cfg.hyper.lr)
    best_net, best_val = net.copy(), validate(net, val_set)[0]
    since = 0
    rows = []
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        if fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_HEADER)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_set))
            costs = []
            for sl in _batches(len(order), cfg.hyper.batch_size):
                idx = np.sort(order[sl])
                x = train_set.syndromes[idx].astype(np.float64)
                cost, grads = net.loss_and_grad(x, train_set.targets(idx))
                if not np.isfinite(cost):
                    raise TrainingDivergence(f"non-finite cost at epoch {epoch} (lr={state.lr:g})")
                adam_step(state, net.parameters(), grads)
                costs.append(cost)
            val, _ = validate(net, val_set)
            if not np.isfinite(val):
                raise TrainingDivergence(f"non-finite validation cost at epoch {epoch}")
            row = {"epoch": epoch, "train_cost": float(np.mean(costs)), "val_cost": val,
                   "lr": state.lr, "seconds": time.perf_counter() - t0}
            rows.append(row)
            if writer:
                writer.writerow([epoch, repr(row["train_cost"]), repr(val), repr(state.lr),
                                 f"{row['seconds']:.3f}"])
                fh.flush()
            log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, row["train_cost"], val, state.lr)
            if val < best_val:
                best_val, best_net, since = val, net.copy(), 0
            else:
                since += 1
                if since >= cfg.hyper.patience:
                    state.lr *= cfg.hyper.decay
                    since = 0
                    if state.lr < cfg.hyper.min_lr:
                        break
    finally:
        if fh:
            fh.close()
    best_net.metadata["training"] = cfg.to_dict()
    best_net.metadata["best_val_cost"] = best_val
    return TrainingResult(best_net, rows, best_val, cfg)
