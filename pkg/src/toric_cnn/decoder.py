"""Iterative CNN decoder, parallel line decoder and local baseline rules.

The CNN decoder repeatedly evaluates the network on the current syndrome and
flips the highest-scoring faces. All hot loops run on canonical flat bit
arrays (see :mod:`toric_cnn.lattice`) so many trials can advance in lockstep.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeGeometry, face_edge_table, from_canonical, site_axis, to_canonical
from .nn import Network, check_decoder_compat, softmax
from .toric import ErrorConfig, Syndrome, boundary, logical_class_bits, vertex_parity


class Outcome(str, enum.Enum):
    CORRECTED = "corrected-trivial"
    LOGICAL_FAILURE = "logical-failure"
    TIMEOUT = "timeout"


@dataclass
class DecoderConfig:
    flip_divisor: int = 50
    budget_factor: float = 4.0
    max_steps: int | None = None
    stall_window: int = 8
    mode: str = "noiseless"
    threshold_mode: bool = False
    threshold_cutoff: float = 0.5
    line_budget: int | None = None
    # noisy single-shot rounds
    round_budget: int | None = None
    round_stall_window: int = 1
    round_reject_nonimproving: bool = True

    def __post_init__(self):
        if self.flip_divisor < 1:
            raise ValueError("flip divisor must be >= 1")
        if self.budget_factor <= 0 or self.stall_window < 1 or self.round_stall_window < 1:
            raise ValueError("budgets and stall windows must be positive")
        if self.mode not in ("noiseless", "noisy"):
            raise ValueError(f"unknown decoder mode {self.mode!r}")

    def step_budget(self, weight: int) -> int:
        budget = max(1, int(np.ceil(self.budget_factor * weight)))
        return budget if self.max_steps is None else min(budget, self.max_steps)

    def sweeps(self, geom: LatticeGeometry) -> int:
        if self.line_budget is not None:
            return self.line_budget
        return (geom.dim - 1) * geom.size // 2 + 2


@dataclass
class DecodeOutcome:
    success: Outcome
    nn_steps: int
    line_sweeps: int
    residual_weight: int
    classes: tuple[int, ...] = ()
    correction: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.success is not Outcome.TIMEOUT and self.residual_weight != 0:
            raise ValueError("a classified outcome requires an empty residual syndrome")

    @property
    def failed(self) -> bool:
        return self.success is not Outcome.CORRECTED


# -- network scoring ---------------------------------------------------------------

def nn_rank_faces(net: Network, s: Syndrome) -> np.ndarray:
    """Pre-softmax face scores, shape (L, ..., L, binom(D,2))."""
    check_decoder_compat(net, s.geom.dim)
    return net.forward(s.bits[None].astype(np.float64))[0]


def _scores(net: Network, geom: LatticeGeometry, synd: np.ndarray) -> np.ndarray:
    x = from_canonical(synd, geom).astype(np.float64)
    return to_canonical(net.forward(x), geom)


def flip_count(weight: int, divisor: int) -> int:
    return max(1, weight // divisor)


def _choose(scores: np.ndarray, weights: np.ndarray, cfg: DecoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rows and canonical face indices to flip for each active trial."""
    if cfg.threshold_mode:
        probs = softmax(scores, batch_axes=1)
        pick = probs > cfg.threshold_cutoff
        none = ~pick.any(axis=1)
        if none.any():
            pick[none, np.argmax(scores[none], axis=1)] = True
        rows, faces = np.nonzero(pick)
        return rows, faces
    m = np.maximum(1, weights // cfg.flip_divisor)
    order = np.argsort(-scores, axis=1, kind="stable")
    if m.max() == 1:
        return np.arange(len(m)), order[:, 0]
    take = np.arange(order.shape[1])[None, :] < m[:, None]
    rows = np.nonzero(take)[0]
    return rows, order[take]


def _toggle_edges(synd: np.ndarray, rows: np.ndarray, faces: np.ndarray, table: np.ndarray) -> None:
    n_edges = synd.shape[1]
    flat = (rows[:, None] * n_edges + table[faces]).ravel()
    toggles = np.bincount(flat, minlength=synd.size).astype(np.uint8) & 1
    synd ^= toggles.reshape(synd.shape)


def flip_loop(net: Network, geom: LatticeGeometry, synd: np.ndarray, cfg: DecoderConfig,
              budgets: np.ndarray, stall_window: int, reject_nonimproving: bool = False,
              trace=None):
    """Run the score-and-flip iteration on a batch of canonical syndromes.

    ``synd`` (B, n_edges) is updated in place. Returns the accumulated face
    flips (B, n_faces) and the number of network evaluations per trial.
    """
    table = face_edge_table(geom.dim, geom.size)
    b = synd.shape[0]
    corr = np.zeros((b, geom.n_faces), dtype=np.uint8)
    steps = np.zeros(b, dtype=np.int64)
    weight = synd.sum(axis=1).astype(np.int64)
    best = weight.copy()
    since = np.zeros(b, dtype=np.int64)
    active = weight > 0
    while active.any():
        idx = np.nonzero(active)[0]
        scores = _scores(net, geom, synd[idx])
        rows, faces = _choose(scores, weight[idx], cfg)
        rows = idx[rows]
        before = weight.copy()
        _toggle_edges(synd, rows, faces, table)
        corr[rows, faces] ^= 1
        weight[idx] = synd[idx].sum(axis=1)
        steps[idx] += 1
        if trace is not None:
            for r in idx:
                trace.append({"trial": int(r), "step": int(steps[r]), "weight": int(weight[r]),
                              "flips": faces[rows == r].tolist()})
        if reject_nonimproving:
            worse = np.zeros(b, dtype=bool)
            worse[idx] = weight[idx] >= before[idx]
            if worse.any():
                undo = worse[rows]
                _toggle_edges(synd, rows[undo], faces[undo], table)
                corr[rows[undo], faces[undo]] ^= 1
                weight[worse] = before[worse]
                active &= ~worse
        improved = weight < best
        since[idx] += 1
        since[improved] = 0
        best = np.minimum(best, weight)
        active &= (weight > 0) & (steps < budgets) & (since < stall_window)
    return corr, steps


# -- parallel line decoder ---------------------------------------------------------

def parallel_line_decode(geom: LatticeGeometry, synd: np.ndarray, budget: int):
    """Pair up same-direction violated edges and walk them together.

    ``synd`` is a canonical flat syndrome updated in place. Returns the list of
    flipped canonical faces and the number of sweeps run.
    """
    table = face_edge_table(geom.dim, geom.size)
    shape = geom.site_shape
    L = geom.size
    view = synd.reshape((geom.dim,) + shape)
    flips: list[int] = []
    sweeps = 0
    while sweeps < budget and synd.any():
        sweeps += 1
        moved = False
        for e in np.nonzero(synd)[0]:
            if not synd[e]:
                continue
            d, flat = divmod(int(e), geom.sites)
            x = np.unravel_index(flat, shape)
            others = [a for a in range(geom.dim) if a != d]
            plane = np.take(view[d], x[d], axis=d)
            cand = np.argwhere(plane)
            xo = np.array([x[a] for a in others])
            cand = cand[np.any(cand != xo, axis=1)]
            if cand.size == 0:
                continue
            delta = (cand - xo) % L
            pdist = np.minimum(delta, L - delta)
            k = int(np.argmin(pdist.sum(axis=1)))
            axis_pos = int(np.nonzero(pdist[k])[0][0])
            i = others[axis_pos]
            base = list(x)
            if delta[k, axis_pos] > L - delta[k, axis_pos]:
                base[i] = (base[i] - 1) % L
            channel = geom.face_channel(d, i)
            face = channel * geom.sites + int(np.ravel_multi_index(base, shape))
            synd[table[face]] ^= 1
            flips.append(face)
            moved = True
        if not moved:
            break
    return flips, sweeps


# -- full decoding pipelines -------------------------------------------------------

def decode_batch(net: Network, geom: LatticeGeometry, errors: np.ndarray, cfg: DecoderConfig,
                 fallback: bool = True, trace=None) -> list[DecodeOutcome]:
    """Decode perfect-measurement syndromes of a batch of face-error tensors."""
    check_decoder_compat(net, geom.dim)
    errors = np.asarray(errors, dtype=np.uint8)
    synd = to_canonical(boundary(geom, errors), geom).copy()
    weights = synd.sum(axis=1)
    budgets = np.array([cfg.step_budget(int(w)) for w in weights])
    corr, steps = flip_loop(net, geom, synd, cfg, budgets, cfg.stall_window, trace=trace)
    sweeps = np.zeros(len(errors), dtype=np.int64)
    if fallback:
        for r in np.nonzero(synd.any(axis=1))[0]:
            flips, sweeps[r] = parallel_line_decode(geom, synd[r], cfg.sweeps(geom))
            for f in flips:
                corr[r, f] ^= 1
    residual = errors ^ from_canonical(corr, geom)
    classes = logical_class_bits(geom, residual)
    out = []
    for r in range(len(errors)):
        w = int(synd[r].sum())
        if w:
            success = Outcome.TIMEOUT
        else:
            success = Outcome.LOGICAL_FAILURE if classes[r].any() else Outcome.CORRECTED
        out.append(DecodeOutcome(success, int(steps[r]), int(sweeps[r]), w,
                                 tuple(int(c) for c in classes[r]), corr[r]))
    return out


def nn_decode(net: Network, error: ErrorConfig, cfg: DecoderConfig | None = None,
              fallback: bool = True, trace=None) -> DecodeOutcome:
    """Decode the perfect syndrome of ``error``; the decoder itself only sees the syndrome."""
    cfg = cfg or DecoderConfig()
    return decode_batch(net, error.geom, error.bits[None], cfg, fallback, trace)[0]


def nn_correction(net: Network, s: Syndrome, cfg: DecoderConfig | None = None, fallback: bool = True):
    """Decoder proper: syndrome in, correction out.

    Returns (correction ErrorConfig, residual Syndrome, nn steps, line sweeps).
    Perfect-measurement mode rejects syndromes violating a vertex check.
    """
    cfg = cfg or DecoderConfig()
    geom = s.geom
    check_decoder_compat(net, geom.dim)
    if cfg.mode == "noiseless" and vertex_parity(geom, s.bits).any():
        raise ValueError("syndrome is not a closed-loop configuration")
    synd = to_canonical(s.bits, geom)[None].copy()
    budgets = np.array([cfg.step_budget(int(synd.sum()))])
    corr, steps = flip_loop(net, geom, synd, cfg, budgets, cfg.stall_window)
    sweeps = 0
    if fallback and synd.any():
        flips, sweeps = parallel_line_decode(geom, synd[0], cfg.sweeps(geom))
        for f in flips:
            corr[0, f] ^= 1
    correction = ErrorConfig(geom, from_canonical(corr[0], geom))
    residual = Syndrome(geom, from_canonical(synd[0], geom))
    return correction, residual, int(steps[0]), sweeps


def nn_decode_step(net: Network, s: Syndrome, cfg: DecoderConfig | None = None):
    """One network evaluation: returns (flipped canonical faces, updated syndrome)."""
    cfg = cfg or DecoderConfig()
    geom = s.geom
    check_decoder_compat(net, geom.dim)
    synd = to_canonical(s.bits, geom)[None].copy()
    weight = np.array([int(synd.sum())])
    if weight[0] == 0:
        return np.zeros(0, dtype=np.int64), s.copy()
    rows, faces = _choose(_scores(net, geom, synd), weight, cfg)
    _toggle_edges(synd, rows, faces, face_edge_table(geom.dim, geom.size))
    return faces, Syndrome(geom, from_canonical(synd[0], geom))


def noisy_round_batch(net: Network, geom: LatticeGeometry, errors: np.ndarray, faulty: np.ndarray,
                      cfg: DecoderConfig):
    """One single-shot round against faulty syndromes.

    ``errors`` (B, L.., C) are the true errors and ``faulty`` (B, L.., D) the
    corrupted measurements. Returns (new errors, new true syndromes, flips).
    """
    check_decoder_compat(net, geom.dim)
    synd = to_canonical(np.asarray(faulty, dtype=np.uint8), geom).copy()
    weights = synd.sum(axis=1)
    if cfg.round_budget is not None:
        budgets = np.full(len(synd), cfg.round_budget)
    else:
        budgets = np.maximum(1, weights)
    corr, _ = flip_loop(net, geom, synd, cfg, budgets, cfg.round_stall_window,
                        reject_nonimproving=cfg.round_reject_nonimproving)
    flips = from_canonical(corr, geom)
    new_errors = np.asarray(errors, dtype=np.uint8) ^ flips
    return new_errors, boundary(geom, new_errors), flips


def noisy_round_decode(net: Network, error: ErrorConfig, q: float, cfg: DecoderConfig | None,
                       rng: np.random.Generator):
    """Corrupt the true syndrome, decode once, apply the flips to the true error.

    Returns (flips ErrorConfig, updated ErrorConfig, updated noiseless Syndrome).
    """
    cfg = cfg or DecoderConfig(mode="noisy")
    geom = error.geom
    true = boundary(geom, error.bits)
    faulty = true ^ (rng.random(true.shape) < q).astype(np.uint8)
    new, synd, flips = noisy_round_batch(net, geom, error.bits[None], faulty[None], cfg)
    return ErrorConfig(geom, flips[0]), ErrorConfig(geom, new[0]), Syndrome(geom, synd[0])


# -- local baseline rules ----------------------------------------------------------

def _axis_colors(size: int) -> np.ndarray:
    """Proper coloring of the cycle Z_L: parity, with a third color for odd L."""
    colors = np.arange(size) % 2
    if size % 2:
        colors[-1] = 2
    return colors


def dklp_schedule(geom: LatticeGeometry):
    """Masks of pairwise edge-disjoint faces, one (channel, mask) per sub-step."""
    colors = _axis_colors(geom.size)
    grids = np.indices(geom.site_shape)
    out = []
    for c, (i, j) in enumerate(geom.face_axes):
        ci, cj = colors[grids[i]], colors[grids[j]]
        for a in np.unique(colors):
            for b in np.unique(colors):
                out.append((c, (ci == a) & (cj == b)))
    return out


def _face_violations(geom: LatticeGeometry, s: np.ndarray, i: int, j: int) -> np.ndarray:
    ax_i, ax_j = site_axis(geom, i) + 1, site_axis(geom, j) + 1
    si, sj = s[..., i].astype(np.int64), s[..., j].astype(np.int64)
    return si + np.roll(si, -1, axis=ax_j) + sj + np.roll(sj, -1, axis=ax_i)


def dklp_step(s: Syndrome, rng: np.random.Generator) -> tuple[np.ndarray, Syndrome]:
    """One sweep of the DKLP rule over the independent-set schedule.

    A face flips if 3 or 4 of its edges are violated, and with probability 1/2
    if exactly 2 are. Returns (face flips tensor, updated syndrome).
    """
    geom = s.geom
    bits = s.bits.copy()
    flips = np.zeros(geom.shape(2), dtype=np.uint8)
    for c, mask in dklp_schedule(geom):
        i, j = geom.face_axes[c]
        count = _face_violations(geom, bits, i, j)
        coin = rng.random(count.shape) < 0.5
        f = (mask & ((count >= 3) | ((count == 2) & coin))).astype(np.uint8)
        if not f.any():
            continue
        flips[..., c] ^= f
        bits[..., i] ^= f ^ np.roll(f, 1, axis=site_axis(geom, j) + 1)
        bits[..., j] ^= f ^ np.roll(f, 1, axis=site_axis(geom, i) + 1)
    return flips, Syndrome(geom, bits)


def toom_step(values: np.ndarray, geom: LatticeGeometry, planes=None) -> np.ndarray:
    """Toom's north-east majority rule on every 2D plane family in sequence.

    ``values`` is a ±1 field over faces. In the (i, j) planes the north
    neighbour is +e_j and the east neighbour +e_i; updates within one family
    are synchronous.
    """
    out = np.array(values, copy=True)
    for i, j in planes or geom.face_axes:
        c = geom.face_channel(i, j)
        v = out[..., c]
        north = np.roll(v, -1, axis=j)
        east = np.roll(v, -1, axis=i)
        out[..., c] = np.where((v != north) & (v != east), -v, v)
    return out
