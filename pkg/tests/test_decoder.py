from __future__ import annotations

import numpy as np
import pytest

from toric_cnn.decoder import (
    DecodeOutcome,
    DecoderConfig,
    Outcome,
    decode_batch,
    dklp_schedule,
    dklp_step,
    flip_count,
    nn_correction,
    nn_decode,
    nn_decode_step,
    nn_rank_faces,
    noisy_round_batch,
    noisy_round_decode,
    parallel_line_decode,
    toom_step,
)
from toric_cnn.lattice import LatticeGeometry, face_edge_table, from_canonical, to_canonical
from toric_cnn.nn import CheckpointError, decoder_network, init_network
from toric_cnn.toric import ErrorConfig, Syndrome, apply_flips, boundary, sample_error, syndrome_of


def strip_error(geom, width=1, axis=0, plane=(0, 1), offset=0):
    """Faces of ``plane`` spanning ``axis`` completely, ``width`` rows wide."""
    other = plane[1] if axis == plane[0] else plane[0]
    e = np.zeros(geom.shape(2), dtype=np.uint8)
    c = geom.face_channel(*plane)
    for x in range(geom.size):
        for w in range(width):
            base = [0] * geom.dim
            base[axis] = x
            base[other] = (offset + w) % geom.size
            e[tuple(base) + (c,)] = 1
    return e


def constant_net(dim):
    """All scores equal: the decoder always picks face 0 and stalls."""
    net = init_network(dim, dim, [(3, 2, "tanh"), (1, dim * (dim - 1) // 2, "none")],
                       np.random.default_rng(0), std=0.0)
    from toric_cnn.nn import channel_conventions

    net.metadata["channels"] = channel_conventions(dim)
    return net


def test_flip_count():
    assert flip_count(100, 50) == 2
    assert flip_count(10, 50) == 1
    assert flip_count(149, 50) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(flip_divisor=0)
    with pytest.raises(ValueError):
        DecoderConfig(mode="bogus")
    with pytest.raises(ValueError):
        DecodeOutcome(Outcome.CORRECTED, 1, 0, residual_weight=3)
    assert DecoderConfig().step_budget(10) == 40
    assert DecoderConfig(max_steps=5).step_budget(10) == 5


def test_rank_faces_shape_and_scale_transfer(rng):
    net = decoder_network(4, 5, rng)
    for L in (4, 6):
        geom = LatticeGeometry(4, L)
        s = syndrome_of(sample_error(geom, 0.05, rng))
        scores = nn_rank_faces(net, s)
        assert scores.shape == (L,) * 4 + (6,)
        assert np.all(np.isfinite(scores))
    with pytest.raises(CheckpointError):
        nn_rank_faces(net, syndrome_of(sample_error(LatticeGeometry(3, 4), 0.1, rng)))


def test_decode_step_flips_top_m(rng):
    geom = LatticeGeometry(3, 6)
    net = decoder_network(3, 5, rng)
    error = sample_error(geom, 0.3, rng)
    s = syndrome_of(error)
    m = max(1, s.weight // 50)
    assert m >= 2
    flips, s2 = nn_decode_step(net, s)
    scores = to_canonical(nn_rank_faces(net, s), geom)
    expected = np.argsort(-scores, kind="stable")[:m]
    assert list(flips) == list(expected)
    assert np.array_equal(s2.bits, s.bits ^ syndrome_of(apply_flips(ErrorConfig.zeros(geom), flips)).bits)


def test_tie_break_smallest_index():
    geom = LatticeGeometry(3, 4)
    s = syndrome_of(apply_flips(ErrorConfig.zeros(geom), [10]))
    flips, _ = nn_decode_step(constant_net(3), s)
    assert list(flips) == [0]


def test_zero_syndrome(rng):
    geom = LatticeGeometry(4, 3)
    out = nn_decode(decoder_network(4, 3, rng), ErrorConfig.zeros(geom))
    assert out.success is Outcome.CORRECTED and out.nn_steps == 0 and out.line_sweeps == 0


def test_batch_matches_single_and_is_deterministic(rng):
    geom = LatticeGeometry(3, 4)
    net = decoder_network(3, 6, rng)
    errors = (rng.random((8,) + geom.shape(2)) < 0.08).astype(np.uint8)
    cfg = DecoderConfig()
    batch = decode_batch(net, geom, errors, cfg)
    again = decode_batch(net, geom, errors, cfg)
    for k, e in enumerate(errors):
        single = nn_decode(net, ErrorConfig(geom, e), cfg)
        for other in (batch[k], again[k]):
            assert single.success is other.success
            assert single.nn_steps == other.nn_steps
            assert np.array_equal(single.correction, other.correction)


def test_outcomes_are_consistent(rng):
    geom = LatticeGeometry(3, 4)
    net = decoder_network(3, 6, rng)
    errors = (rng.random((16,) + geom.shape(2)) < 0.1).astype(np.uint8)
    for e, out in zip(errors, decode_batch(net, geom, errors, DecoderConfig())):
        residual = e ^ from_canonical(out.correction, geom)
        assert boundary(geom, residual).sum() == out.residual_weight
        if out.success is not Outcome.TIMEOUT:
            assert out.residual_weight == 0


def test_invalid_syndrome_rejected(rng):
    geom = LatticeGeometry(3, 4)
    bits = np.zeros(geom.shape(1), dtype=np.uint8)
    bits[0, 0, 0, 0] = 1
    with pytest.raises(ValueError):
        nn_correction(decoder_network(3, 3, rng), Syndrome(geom, bits))


@pytest.mark.parametrize("dim", [3, 4])
@pytest.mark.parametrize("size", [3, 4, 5, 6])
def test_parallel_lines_cleared_within_two_sweeps(dim, size):
    geom = LatticeGeometry(dim, size)
    e = strip_error(geom)
    synd = to_canonical(boundary(geom, e), geom).copy()
    assert synd.sum() == 2 * size
    flips, sweeps = parallel_line_decode(geom, synd, budget=10)
    assert synd.sum() == 0 and sweeps <= 2
    residual = apply_flips(ErrorConfig(geom, e), flips)
    assert residual.weight == 0


def test_parallel_line_bookkeeping(rng):
    geom = LatticeGeometry(4, 4)
    for _ in range(20):
        e = sample_error(geom, 0.03, rng)
        synd = to_canonical(boundary(geom, e.bits), geom).copy()
        flips, _ = parallel_line_decode(geom, synd, budget=6)
        tracked = apply_flips(e, flips)
        assert np.array_equal(to_canonical(boundary(geom, tracked.bits), geom), synd)


def test_parallel_line_zero_syndrome():
    geom = LatticeGeometry(4, 3)
    synd = np.zeros(geom.n_edges, dtype=np.uint8)
    assert parallel_line_decode(geom, synd, 5) == ([], 0)


def test_fallback_resolves_stuck_lines():
    geom = LatticeGeometry(4, 5)
    e = ErrorConfig(geom, strip_error(geom, offset=2))
    stuck = nn_decode(constant_net(4), e, fallback=False)
    assert stuck.success is Outcome.TIMEOUT
    out = nn_decode(constant_net(4), e)
    assert out.success is Outcome.CORRECTED and out.line_sweeps >= 1


def test_shift_covariance_of_step(rng):
    geom = LatticeGeometry(3, 5)
    net = decoder_network(3, 6, rng)
    e = sample_error(geom, 0.05, rng)
    t = (2, 0, 3)
    shifted = ErrorConfig(geom, np.roll(e.bits, t, axis=(0, 1, 2)))
    f1, _ = nn_decode_step(net, syndrome_of(e))
    f2, _ = nn_decode_step(net, syndrome_of(shifted))
    scores = to_canonical(nn_rank_faces(net, syndrome_of(e)), geom)
    if np.sum(scores == scores.max()) == 1:
        moved = np.zeros(geom.shape(2), dtype=np.uint8)
        moved[geom.from_index(2, int(f1[0])).base + (int(f1[0]) // geom.sites,)] = 1
        moved = np.roll(moved, t, axis=(0, 1, 2))
        assert int(np.flatnonzero(to_canonical(moved, geom))[0]) == int(f2[0])


def test_threshold_mode(rng):
    geom = LatticeGeometry(3, 4)
    s = syndrome_of(sample_error(geom, 0.1, rng))
    net = decoder_network(3, 4, rng)
    flips, _ = nn_decode_step(net, s, DecoderConfig(threshold_mode=True, threshold_cutoff=0.99))
    scores = to_canonical(nn_rank_faces(net, s), geom)
    assert list(flips) == [int(np.argmax(scores))]
    flips, _ = nn_decode_step(net, s, DecoderConfig(threshold_mode=True, threshold_cutoff=0.0))
    assert len(flips) == geom.n_faces


# -- noisy rounds --------------------------------------------------------------------------

def test_noisy_round_trivial(rng):
    geom = LatticeGeometry(4, 3)
    net = decoder_network(4, 4, rng)
    flips, new, s_out = noisy_round_decode(net, ErrorConfig.zeros(geom), 0.0, None, rng)
    assert flips.weight == 0 and new.weight == 0 and s_out.weight == 0


def test_noisy_round_bookkeeping(rng):
    geom = LatticeGeometry(3, 3)
    net = decoder_network(3, 5, rng)
    errors = (rng.random((1000,) + geom.shape(2)) < 0.05).astype(np.uint8)
    faulty = boundary(geom, errors) ^ (rng.random((1000,) + geom.shape(1)) < 0.05).astype(np.uint8)
    new, s_out, flips = noisy_round_batch(net, geom, errors, faulty, DecoderConfig(mode="noisy"))
    assert np.array_equal(new, errors ^ flips)
    assert np.array_equal(s_out, boundary(geom, new))


def test_noisy_round_matches_capped_decode_at_q0(rng):
    geom = LatticeGeometry(3, 3)
    net = decoder_network(3, 5, rng)
    errors = (rng.random((20,) + geom.shape(2)) < 0.05).astype(np.uint8)
    noisy_cfg = DecoderConfig(mode="noisy", round_stall_window=8, round_reject_nonimproving=False)
    _, _, flips = noisy_round_batch(net, geom, errors, boundary(geom, errors), noisy_cfg)
    plain = decode_batch(net, geom, errors, DecoderConfig(budget_factor=1.0), fallback=False)
    for k, out in enumerate(plain):
        assert np.array_equal(to_canonical(flips[k], geom), out.correction)


# -- local rules ------------------------------------------------------------------------------

@pytest.mark.parametrize("dim", [3, 4])
@pytest.mark.parametrize("size", [3, 4, 5])
def test_dklp_schedule_is_independent_and_covering(dim, size):
    geom = LatticeGeometry(dim, size)
    table = face_edge_table(dim, size)
    covered = np.zeros(geom.n_faces, dtype=int)
    for c, mask in dklp_schedule(geom):
        faces = c * geom.sites + np.flatnonzero(mask.ravel())
        covered[faces] += 1
        edges = table[faces].ravel()
        assert len(np.unique(edges)) == len(edges)
    assert np.all(covered == 1)


def test_dklp_rules(rng):
    geom = LatticeGeometry(4, 4)
    e = apply_flips(ErrorConfig.zeros(geom), [77])
    flips, s = dklp_step(syndrome_of(e), rng)
    assert s.weight == 0 and np.array_equal(flips, e.bits)
    bits = np.zeros(geom.shape(1), dtype=np.uint8)
    bits[1, 2, 3, 0, 2] = 1
    for _ in range(20):
        flips, _ = dklp_step(Syndrome(geom, bits), rng)
        assert not flips.any()


def test_dklp_clears_single_faces():
    geom = LatticeGeometry(4, 4)
    cleared = 0
    for seed in range(500):
        rng = np.random.default_rng(seed)
        s = syndrome_of(apply_flips(ErrorConfig.zeros(geom), [int(rng.integers(geom.n_faces))]))
        for _ in range(10):
            _, s = dklp_step(s, rng)
        cleared += s.weight == 0
    assert cleared / 500 >= 0.9


def test_toom_rules():
    geom = LatticeGeometry(4, 4)
    ones = np.ones(geom.shape(2))
    assert np.array_equal(toom_step(ones, geom), ones)
    v = ones.copy()
    v[1, 2, 0, 3, 4] = -1
    for _ in range(2):
        v = toom_step(v, geom)
    assert np.array_equal(v, ones)
    w = ones.copy()
    w[..., 0] = -1
    assert np.array_equal(toom_step(w, geom, planes=[(0, 1)]), w)
