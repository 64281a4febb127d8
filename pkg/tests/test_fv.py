import csv
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedface.data import PartitionPlan, ValidationShard, generate
from fedface.fv import (
    FvParams, MovingStats, ScoringError, ValidatorState, WeightingError, as_weighting,
    best_threshold, fv_round, grid_search, normalize, normalize_local, normalize_moving,
    random_search, sample_simplex, score_accuracy, score_verification, select_and_smooth,
    simplex_lattice, verification_pairs, verification_score_from_embeddings, write_trace,
)
from fedface.model import BackboneSpec, Batch, HeadSpec, init_backbone

# ------------------------------------------------------------------ sampling


def test_sample_simplex_degenerate_and_error(rng):
    assert list(sample_simplex(rng, 1)) == [1.0]
    with pytest.raises(WeightingError):
        sample_simplex(rng, 0)


def test_sample_simplex_mean(rng):
    draws = np.array([sample_simplex(rng, 3) for _ in range(100_000)])
    assert np.all(np.abs(draws.mean(0) - 1 / 3) < 0.01)
    assert np.all(draws >= 0) and np.allclose(draws.sum(1), 1.0)


def test_as_weighting_rejects_bad_input():
    for bad in ([], [-0.1, 1.1], [0.0, 0.0], [np.nan, 1.0]):
        with pytest.raises(WeightingError):
            as_weighting(bad)


# ------------------------------------------------------------- normalization


def test_normalize_local_hand_arithmetic():
    out = normalize_local(np.array([[1.0, 2.0, 3.0]]), 0.001)
    denom = np.sqrt(2.0 / 3.0 + 0.001)
    np.testing.assert_allclose(out[0], np.array([1.0, 2.0, 3.0]) / denom, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out[0], [1.2238, 2.4476, 3.6714], atol=1e-4)


def test_normalize_local_constant_and_zero_rows():
    out = normalize_local(np.array([[2.5, 2.5, 2.5], [0.0, 0.0, 0.0]]), 0.001)
    np.testing.assert_allclose(out[0], 2.5 / np.sqrt(0.001), rtol=1e-15)
    assert np.all(out[1] == 0.0)


def test_normalize_moving_gamma_one_is_single_round():
    S = np.array([[0.1, 0.7, 0.4], [3.0, 3.0, 5.0]])
    stale = [MovingStats(9.0, 4.0, True), MovingStats(-1.0, 0.5, True)]
    out, stats = normalize_moving(S, stale, 1.0, 0.001)
    np.testing.assert_allclose(out, normalize_local(S, 0.001), rtol=1e-14)
    for row, st_ in zip(S, stats):
        assert st_.mu == pytest.approx(row.mean()) and st_.nu == pytest.approx(row.var())
    assert stale[0].mu == 9.0  # inputs untouched


def test_normalize_moving_frozen_stats_limit():
    S = np.array([[0.3, 0.9, 0.5]])
    out, _ = normalize_moving(S, [MovingStats(0.0, 1.0, True)], 1e-12, 0.001)
    np.testing.assert_allclose(out, S / np.sqrt(1.001), rtol=1e-9)


def test_normalize_moving_two_rounds_by_hand():
    gamma, eps = 0.5, 0.001
    _, st1 = normalize_moving(np.array([[0.0, 2.0]]), [MovingStats()], gamma, eps)
    # first use seeds the statistics from the row: mu = 1, nu = 1
    assert (st1[0].mu, st1[0].nu) == (1.0, 1.0)
    out, st2 = normalize_moving(np.array([[4.0, 6.0]]), st1, gamma, eps)
    mu = 0.5 * 1.0 + 0.5 * 5.0
    nu = 0.5 * 1.0 + 0.5 * ((4.0 - mu) ** 2 + (6.0 - mu) ** 2) / 2
    assert st2[0].mu == 3.0 and st2[0].nu == pytest.approx(nu)
    np.testing.assert_allclose(out[0], np.array([4.0, 6.0]) / np.sqrt(nu + eps))


def test_normalize_moving_length_mismatch():
    with pytest.raises(ValueError):
        normalize_moving(np.ones((2, 3)), [MovingStats()], 0.5, 0.001)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (1, 5), elements=st.floats(-100, 100)))
def test_local_norm_preserves_argmax_and_unit_std(S):
    out = normalize_local(S, 0.001)
    assert np.argmax(out[0]) == np.argmax(S[0])
    if S[0].var() > 1000 * 0.001:
        assert 0.999 <= out[0].std() <= 1.0 + 1e-12


# ------------------------------------------------------------------ selection


def test_select_and_smooth_example():
    S = np.array([[0.5, 1.0, 1.0], [0.5, 2.0, 1.0]])
    cands = [as_weighting([0.5, 0.5]), as_weighting([0.9, 0.1]), as_weighting([0.2, 0.8])]
    w, t = select_and_smooth(S, cands, cands[0], 0.01)
    assert t == 1
    np.testing.assert_allclose(w, [0.504, 0.496], atol=1e-15)


def test_select_and_smooth_full_replacement_and_ties():
    cands = [as_weighting([0.5, 0.5]), as_weighting([0.9, 0.1])]
    w, t = select_and_smooth(np.array([[1.0, 2.0]]), cands, cands[0], 1.0)
    assert t == 1 and w.tobytes() == cands[1].tobytes()
    _, t = select_and_smooth(np.array([[2.0, 2.0]]), cands, cands[0], 1.0)
    assert t == 0


def test_fv_params_errors_name_the_field():
    with pytest.raises(ValueError, match="fv.phi"):
        FvParams(phi=0.0)
    with pytest.raises(ValueError, match="fv.T"):
        FvParams(T=0)


# ------------------------------------------------------------------- fv_round


class Planted:
    """Scores a backbone by how close it is to a target vector."""

    def __init__(self, target, fail=False):
        self.target, self.fail, self.stats = target, fail, MovingStats()

    def score(self, theta_hat):
        if self.fail:
            raise RuntimeError("validator offline")
        return -float(np.sum((theta_hat - self.target) ** 2))


def _snapshot():
    return [np.eye(3)[i].copy() for i in range(3)]


def test_fv_round_t1_is_identity(rng):
    w = as_weighting([0.2, 0.3, 0.5])
    rec = fv_round(_snapshot(), w, [Planted(np.eye(3)[1])], FvParams(T=1, phi=1.0), rng)
    assert rec.w.tobytes() == w.tobytes() and rec.t_hat == 0


@pytest.mark.parametrize("norm", ["local", "moving", "none"])
def test_fv_round_never_selects_worse_than_current(norm):
    rng = np.random.default_rng(0)
    vals = [Planted(np.eye(3)[i]) for i in range(3)]
    w = as_weighting([0.6, 0.3, 0.1])
    fvp = FvParams(T=4, phi=0.2, norm=norm, gamma=0.3)
    for _ in range(100):
        rec = fv_round(_snapshot(), w, vals, fvp, rng)
        sums = rec.S_norm.sum(0)
        assert sums[rec.t_hat] >= sums[0]
        assert np.all(rec.w >= 0) and rec.w.sum() == pytest.approx(1.0, abs=1e-12)
        w = rec.w


def test_fv_round_failure_leaves_w_and_stats_unchanged(rng):
    w = as_weighting([0.2, 0.3, 0.5])
    vals = [Planted(np.eye(3)[0]), Planted(np.eye(3)[1], fail=True)]
    rec = fv_round(_snapshot(), w, vals, FvParams(norm="moving"), rng)
    assert rec.failed and rec.w.tobytes() == w.tobytes()
    assert not vals[0].stats.initialized


def test_fv_round_moving_mode_updates_stats_only_in_moving(rng):
    v = Planted(np.eye(3)[0])
    fv_round(_snapshot(), [1 / 3] * 3, [v], FvParams(norm="local"), rng)
    assert not v.stats.initialized
    fv_round(_snapshot(), [1 / 3] * 3, [v], FvParams(norm="moving"), rng)
    assert v.stats.initialized


def test_fv_round_deterministic_and_snapshot_untouched():
    snap = _snapshot()
    digest = hashlib.sha256(b"".join(s.tobytes() for s in snap)).hexdigest()
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(42)
        w = as_weighting([1 / 3] * 3)
        for _ in range(10):
            w = fv_round(snap, w, [Planted(np.eye(3)[2])], FvParams(phi=0.3), rng).w
        outs.append(w.tobytes())
    assert outs[0] == outs[1]
    assert hashlib.sha256(b"".join(s.tobytes() for s in snap)).hexdigest() == digest


def test_fv_round_steers_towards_planted_party():
    rng = np.random.default_rng(7)
    w = as_weighting([1 / 3] * 3)
    for _ in range(300):
        w = fv_round(_snapshot(), w, [Planted(np.eye(3)[1])], FvParams(phi=0.1), rng).w
    assert w[1] > 0.8


# ---------------------------------------------------------------- grid search


def test_simplex_lattice_counts():
    assert len(simplex_lattice(3, 2)) == 6
    assert len(simplex_lattice(3, 10)) == 66
    assert all(abs(sum(p) - 1) < 1e-12 for p in simplex_lattice(3, 10))


def test_grid_search_identical_backbones_is_constant():
    theta = np.arange(4.0)
    surface = grid_search([theta] * 3, [Planted(np.zeros(4))], 4)
    vals = {float(v[0]) for v in surface.values()}
    assert len(vals) == 1


def test_grid_search_errors():
    with pytest.raises(WeightingError):
        grid_search([np.ones(2)] * 2, [Planted(np.zeros(2))], 4)
    with pytest.raises(ValueError):
        grid_search([np.ones(2)] * 3, [Planted(np.zeros(2))], 1)


def test_grid_and_random_search_agree_on_planted_target(rng):
    target = 0.7 * np.eye(3)[0] + 0.2 * np.eye(3)[1] + 0.1 * np.eye(3)[2]
    surface = grid_search(_snapshot(), [Planted(target)], 10)
    best = max(surface, key=lambda k: surface[k].sum())
    w, _ = random_search(_snapshot(), [Planted(target)], 5000, rng)
    assert np.max(np.abs(np.array(best) - w)) <= 0.1
    np.testing.assert_allclose(best, [0.7, 0.2, 0.1], atol=1e-12)


# ------------------------------------------------------------------- scorers


def _shard_from_embeddings(e, y, n_folds=5):
    folds = tuple(Batch(e[k::n_folds], y[k::n_folds]) for k in range(n_folds))
    return ValidationShard(folds, owner=0)


def _identity_spec(d):
    spec = BackboneSpec(input_dim=d, hidden_dims=(), feature_dim=d)
    return spec, np.concatenate([np.eye(d).reshape(-1), np.zeros(d)])


def test_best_threshold_matches_brute_force(rng):
    for _ in range(50):
        s = np.round(rng.normal(size=30), 1)
        y = rng.integers(0, 2, size=30)
        thr = best_threshold(s, y)
        acc = np.mean((s >= thr) == (y == 1))
        cuts = np.concatenate([[s.min() - 1], (np.sort(s)[1:] + np.sort(s)[:-1]) / 2, [s.max() + 1]])
        assert acc == pytest.approx(max(np.mean((s >= c) == (y == 1)) for c in cuts))


def test_verification_perfectly_separable_is_one(rng):
    y = np.repeat(np.arange(4), 10)
    e = np.eye(4)[y]
    spec, theta = _identity_spec(4)
    assert score_verification(theta, _shard_from_embeddings(e, y), spec, rng, pairs_per_fold=50) == 1.0


def test_verification_shuffled_labels_near_chance():
    rng = np.random.default_rng(3)
    plan = PartitionPlan(val_samples_per_class=50)
    _, shards = generate(plan)
    spec = BackboneSpec()
    theta = init_backbone(spec, rng)
    scores = []
    for _ in range(20):
        sh = shards[0]
        folds = tuple(Batch(f.inputs, rng.permutation(f.labels)) for f in sh.folds)
        scores.append(score_verification(theta, ValidationShard(folds, 0), spec, rng, pairs_per_fold=300))
    assert abs(np.mean(scores) - 0.5) < 0.05


def test_verification_scale_invariant(rng):
    y = np.repeat(np.arange(3), 20)
    e = rng.normal(size=(60, 5)) + 2 * np.eye(5)[y]
    sh = _shard_from_embeddings(e, y)
    pairs = verification_pairs(sh, rng, 100)
    emb = [f.inputs for f in sh.folds]
    a = verification_score_from_embeddings(emb, pairs)
    b = verification_score_from_embeddings([3.7 * x for x in emb], pairs)
    assert a == b and 0.5 < a <= 1.0


def test_verification_needs_two_classes(rng):
    y = np.zeros(20, dtype=np.int64)
    with pytest.raises(ScoringError):
        verification_pairs(_shard_from_embeddings(np.ones((20, 2)), y), rng, 10)


def test_validator_state_matches_functional_scorer(rng):
    _, shards = generate(PartitionPlan(val_samples_per_class=20))
    spec = BackboneSpec()
    theta = init_backbone(spec, rng)
    pairs = verification_pairs(shards[1], rng, 100)
    v = ValidatorState(1, shards[1], spec, pairs)
    assert v.score(theta) == pytest.approx(score_verification(theta, shards[1], spec, pairs=pairs), abs=1e-15)


def test_accuracy_random_head_near_chance(rng):
    C, d = 4, 6
    spec, theta = _identity_spec(d)
    h = HeadSpec(feature_dim=d, num_classes=C)
    accs = []
    for _ in range(200):
        y = rng.integers(0, C, size=50)
        sh = _shard_from_embeddings(rng.normal(size=(50, d)), y)
        accs.append(score_accuracy(theta, rng.normal(size=d * C), sh, spec, h))
    assert abs(np.mean(accs) - 1 / C) < 0.02


def test_accuracy_one_class_biased_head(rng):
    spec, theta = _identity_spec(2)
    h = HeadSpec(feature_dim=2, num_classes=1)
    sh = _shard_from_embeddings(rng.normal(size=(10, 2)), np.zeros(10, dtype=np.int64))
    assert score_accuracy(theta, np.ones(2), sh, spec, h) == 1.0
    with pytest.raises(ScoringError):
        score_accuracy(theta, np.ones(3), sh, spec, h)


# ---------------------------------------------------------------------- trace


def test_trace_csv(tmp_path, rng):
    recs, w = [], as_weighting([1 / 3] * 3)
    vals = [Planted(np.eye(3)[i]) for i in range(2)]
    for r in range(3):
        rec = fv_round(_snapshot(), w, vals, FvParams(), rng, round_index=r + 1)
        recs.append(rec)
        w = rec.w
    write_trace(tmp_path / "t.csv", recs, 3, 2, 3)
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(rows) == 3 and rows[2]["round"] == "3"
    assert float(rows[2]["w1"]) == recs[2].w[1]
    assert float(rows[0]["Snorm_v1_c2"]) == recs[0].S_norm[1, 2]


def test_normalize_dispatch():
    S = np.array([[1.0, 2.0]])
    assert np.array_equal(normalize(S, "none")[0], S)
    with pytest.raises(ValueError):
        normalize(S, "zscore")


def test_held_out_accuracy_matches_fold_by_fold_recomputation():
    from fedface.fv import _held_out_accuracy
    rng = np.random.default_rng(11)
    for _ in range(300):
        n = int(rng.integers(20, 150))
        s = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        y = rng.integers(0, 2, size=n)
        f = np.arange(n) % 5
        ref = []
        for k in range(5):
            keep = f != k
            thr = best_threshold(s[keep], y[keep])
            ref.append(np.mean((s[~keep] >= thr) == (y[~keep] == 1)))
        assert _held_out_accuracy(s, y, f, 5) == pytest.approx(np.mean(ref), abs=1e-12)
