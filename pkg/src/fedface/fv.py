"""Federated validation: searching the aggregation weighting.

Each FV round freezes a snapshot of the trainers' local backbones, scores a
few candidate weightings on every validator (the first candidate is always
the weighting currently in use), rescales each validator's scores so that
easy and hard validation sets count equally, and moves the current
weighting a small step towards the best candidate.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import params
from .data import ValidationShard
from .model import BackboneSpec, HeadSpec, forward_features

NORMS = ("local", "moving", "none")
SCORERS = ("verification", "accuracy")


class WeightingError(ValueError):
    pass


def as_weighting(w) -> np.ndarray:
    """Validate and renormalize a weighting onto the probability simplex."""
    w = np.array(w, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise WeightingError("a weighting needs at least one entry")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise WeightingError(f"weights must be finite and non-negative, got {w}")
    total = w.sum()
    if total <= 0:
        raise WeightingError("weights sum to zero")
    w = w / total
    w.flags.writeable = False
    return w


def sample_simplex(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draw from the (n-1)-simplex via normalized exponentials."""
    if n < 1:
        raise WeightingError("cannot sample a weighting over zero trainers")
    e = rng.standard_exponential(n)
    return as_weighting(e)


@dataclass
class MovingStats:
    mu: float = 0.0
    nu: float = 0.0
    initialized: bool = False


@dataclass(frozen=True)
class FvParams:
    T: int = 3
    eps: float = 1e-3
    phi: float = 0.01
    gamma: float = 0.01
    norm: str = "local"
    fv_every: int = 1
    seed: int = 0
    scorer: str = "verification"
    pairs_per_fold: int = 2000

    def __post_init__(self):
        checks = [
            (self.T >= 1, "T", "an integer >= 1"),
            (self.eps > 0, "eps", "> 0"),
            (0.0 < self.phi <= 1.0, "phi", "(0, 1]"),
            (0.0 < self.gamma <= 1.0, "gamma", "(0, 1]"),
            (self.norm in NORMS, "norm", f"one of {NORMS}"),
            (self.fv_every >= 1, "fv_every", "an integer >= 1"),
            (self.scorer in SCORERS, "scorer", f"one of {SCORERS}"),
            (self.pairs_per_fold >= 1, "pairs_per_fold", "an integer >= 1"),
        ]
        for ok, name, legal in checks:
            if not ok:
                raise ValueError(f"fv.{name}={getattr(self, name)!r} is invalid; legal range: {legal}")


# ---------------------------------------------------------------- scoring


class ScoringError(RuntimeError):
    pass


def verification_pairs(shard: ValidationShard, rng: np.random.Generator, pairs_per_fold: int):
    """Balanced same/different-class index pairs for every fold.

    Returns one ``(i, j, same)`` triple of arrays per fold, with
    ``pairs_per_fold`` positive and ``pairs_per_fold`` negative pairs.
    """
    out = []
    for k, fold in enumerate(shard.folds):
        y = np.asarray(fold.labels)
        if len(y) < 2 or len(np.unique(y)) < 2:
            raise ScoringError(f"fold {k} of shard {shard.owner} cannot form both pair kinds")
        ii, jj = np.triu_indices(len(y), k=1)
        same = y[ii] == y[jj]
        pos, neg = np.flatnonzero(same), np.flatnonzero(~same)
        if len(pos) == 0:
            raise ScoringError(f"fold {k} of shard {shard.owner} has no same-class pair")
        pick_pos = rng.choice(pos, size=pairs_per_fold, replace=len(pos) < pairs_per_fold)
        pick_neg = rng.choice(neg, size=pairs_per_fold, replace=len(neg) < pairs_per_fold)
        sel = np.concatenate([pick_pos, pick_neg])
        out.append((ii[sel], jj[sel], same[sel]))
    return out


def _best_threshold_sorted(s: np.ndarray, y: np.ndarray) -> float:
    """Best accept threshold for similarities ``s`` already sorted ascending."""
    n = len(s)
    # correct[t] for a cut that rejects s[:t]: rejected negatives + accepted positives,
    # up to the constant number of positives
    correct = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(1 - 2 * y, out=correct[1:])
    tied = np.flatnonzero(s[1:] <= s[:-1]) + 1
    if tied.size:
        correct[tied] = np.iinfo(np.int64).min
    k = int(np.argmax(correct))
    if k == 0:
        return float(s[0]) - 1.0
    if k == n:
        return float(s[-1]) + 1.0
    return 0.5 * float(s[k - 1] + s[k])


def best_threshold(sims: np.ndarray, same: np.ndarray) -> float:
    """Accept threshold (accept when ``sim >= t``) maximizing pair accuracy.

    Among equally good thresholds the lowest is returned; it sits midway
    between two neighbouring distinct similarities.
    """
    order = np.argsort(sims, kind="stable")
    return _best_threshold_sorted(np.asarray(sims)[order], np.asarray(same, dtype=np.int64)[order])


def _unit_rows(e: np.ndarray) -> np.ndarray:
    return e / np.sqrt(np.einsum("ij,ij->i", e, e) + 1e-300)[:, None]


def _flatten_pairs(pairs, fold_sizes):
    """Per-fold flat indices into each fold's Gram matrix, plus labels and fold ids."""
    flat = [i * n + j for (i, j, _), n in zip(pairs, fold_sizes)]
    same = np.concatenate([sm for (_, _, sm) in pairs]).astype(np.int64)
    fold = np.concatenate([np.full(len(sm), k) for k, (_, _, sm) in enumerate(pairs)])
    return flat, same, fold


def _pair_similarities(embeddings, flat) -> np.ndarray:
    out = []
    for e, idx in zip(embeddings, flat):
        u = _unit_rows(np.asarray(e, dtype=np.float64))
        out.append((u @ u.T).ravel().take(idx))
    return np.concatenate(out)


def _held_out_accuracy(sims, same, fold, n_folds) -> float:
    """Mean over folds of the held-out accuracy at the threshold tuned on the rest.

    Works on one sorted copy of all pairs: the accuracy of every cut on the
    other folds is the full prefix sum minus the held-out fold's prefix sum.
    Tied neighbours are not valid cut positions.  The result equals running
    :func:`best_threshold` on the other folds' pairs.
    """
    order = np.argsort(sims)
    s, y, f = sims[order], same[order], fold[order]
    n = len(s)
    inc = 1 - 2 * y
    total = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(inc, out=total[1:])
    tied = np.flatnonzero(s[1:] <= s[:-1]) + 1
    accs = []
    for k in range(n_folds):
        held = f == k
        part = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(inc * held, out=part[1:])
        correct = total - part
        correct[tied] = np.iinfo(np.int64).min
        t = int(np.argmax(correct))
        keep_idx = np.flatnonzero(~held)
        c = int(np.searchsorted(keep_idx, t))
        if c == 0:
            thr = s[keep_idx[0]] - 1.0
        elif c == len(keep_idx):
            thr = s[keep_idx[-1]] + 1.0
        else:
            thr = 0.5 * (s[keep_idx[c - 1]] + s[keep_idx[c]])
        cut = int(np.searchsorted(s, thr, side="left"))
        n_held = n - len(keep_idx)
        n_pos = int(np.count_nonzero(y[held]))
        accs.append((n_pos + part[cut]) / n_held)
    return float(np.mean(accs))


def verification_score_from_embeddings(embeddings: Sequence[np.ndarray], pairs) -> float:
    """Mean held-out-fold pair accuracy given per-fold embeddings.

    For each fold the threshold is tuned on the pairs of all other folds and
    accuracy is measured on the fold itself.
    """
    flat, same, fold = _flatten_pairs(pairs, [len(e) for e in embeddings])
    return _held_out_accuracy(_pair_similarities(embeddings, flat), same, fold, len(pairs))


def score_verification(theta_hat, shard: ValidationShard, b_spec: BackboneSpec,
                       rng: np.random.Generator | None = None, pairs=None,
                       pairs_per_fold: int = 2000) -> float:
    """Fold-based face-verification accuracy of a backbone on one shard.

    Pass ``pairs`` (from :func:`verification_pairs`) to reuse a fixed pair
    protocol; otherwise pairs are drawn from ``rng``.
    """
    if pairs is None:
        if rng is None:
            raise ScoringError("either pairs or rng must be given")
        pairs = verification_pairs(shard, rng, pairs_per_fold)
    emb = [forward_features(b_spec, theta_hat, f.inputs) for f in shard.folds]
    return verification_score_from_embeddings(emb, pairs)


def class_logits(b_spec: BackboneSpec, h_spec: HeadSpec, theta, omega, inputs) -> np.ndarray:
    feats = forward_features(b_spec, theta, inputs)
    Om = np.asarray(omega).reshape(h_spec.feature_dim, h_spec.num_classes)
    if h_spec.loss == "cosine_margin":
        feats = feats / np.sqrt(np.sum(feats ** 2, axis=1, keepdims=True) + 1e-12)
        Om = Om / np.sqrt(np.sum(Om ** 2, axis=0, keepdims=True) + 1e-12)
    return feats @ Om


def score_accuracy(theta_hat, omega_ref, shard: ValidationShard, b_spec: BackboneSpec,
                   h_spec: HeadSpec) -> float:
    """Top-1 classification accuracy over all folds of ``shard``."""
    if np.asarray(omega_ref).size != h_spec.num_params:
        raise ScoringError("reference head does not match the head spec")
    x = np.concatenate([f.inputs for f in shard.folds])
    y = np.concatenate([f.labels for f in shard.folds])
    if y.size and y.max() >= h_spec.num_classes:
        raise ScoringError("shard labels exceed the reference head's classes")
    pred = np.argmax(class_logits(b_spec, h_spec, theta_hat, omega_ref, x), axis=1)
    return float(np.mean(pred == y))


class Validator(Protocol):
    stats: MovingStats

    def score(self, theta_hat: np.ndarray) -> float: ...


@dataclass
class ValidatorState:
    """A validator holding one private shard and its moving-norm statistics."""

    validator_id: int
    shard: ValidationShard
    b_spec: BackboneSpec
    pairs: list = field(repr=False)
    mode: str = "verification"
    h_spec: HeadSpec | None = None
    omega_ref: np.ndarray | None = field(default=None, repr=False)
    stats: MovingStats = field(default_factory=MovingStats)

    @classmethod
    def build(cls, validator_id, shard, b_spec, rng, pairs_per_fold=2000, **kw):
        return cls(validator_id, shard, b_spec, verification_pairs(shard, rng, pairs_per_fold), **kw)

    def __post_init__(self):
        sizes = [len(f) for f in self.shard.folds]
        self._inputs = np.concatenate([f.inputs for f in self.shard.folds])
        self._splits = np.cumsum(sizes)[:-1]
        self._flat = _flatten_pairs(self.pairs, sizes)

    def score(self, theta_hat) -> float:
        if self.mode == "accuracy":
            return score_accuracy(theta_hat, self.omega_ref, self.shard, self.b_spec, self.h_spec)
        flat, same, fold = self._flat
        emb = np.split(forward_features(self.b_spec, theta_hat, self._inputs), self._splits)
        return _held_out_accuracy(_pair_similarities(emb, flat), same, fold, len(flat))


# ---------------------------------------------------------- normalization


def normalize_local(S: np.ndarray, eps: float) -> np.ndarray:
    """Divide each validator's row by its within-round standard deviation."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    S = np.asarray(S, dtype=np.float64)
    return S / np.sqrt(S.var(axis=1, keepdims=True) + eps)


def normalize_moving(S: np.ndarray, stats: Sequence[MovingStats], gamma: float, eps: float):
    """Divide each row by an exponentially tracked standard deviation.

    Statistics that have never been updated are seeded from the first row
    they see.  Returns the normalized matrix and fresh stats objects; the
    inputs are left untouched.
    """
    S = np.asarray(S, dtype=np.float64)
    if len(stats) != S.shape[0]:
        raise ValueError(f"{len(stats)} moving stats for {S.shape[0]} validators")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    out, new_stats = np.empty_like(S), []
    for i, (row, st) in enumerate(zip(S, stats)):
        g = gamma if st.initialized else 1.0
        mu = (1 - g) * st.mu + g * row.mean()
        nu = (1 - g) * st.nu + g * np.mean((row - mu) ** 2)
        out[i] = row / np.sqrt(nu + eps)
        new_stats.append(MovingStats(float(mu), float(nu), True))
    return out, new_stats


def normalize(S, norm: str, stats=None, gamma=0.01, eps=1e-3):
    if norm == "local":
        return normalize_local(S, eps), stats
    if norm == "moving":
        return normalize_moving(S, stats, gamma, eps)
    if norm == "none":
        return np.asarray(S, dtype=np.float64), stats
    raise ValueError(f"unknown norm {norm!r}")


def select_and_smooth(S_norm: np.ndarray, candidates: Sequence[np.ndarray], w, phi: float):
    """Pick the candidate with the largest column sum and blend it into ``w``.

    Ties go to the lowest candidate index, i.e. towards the current weighting.
    """
    if len(candidates) == 0:
        raise WeightingError("no candidate weightings")
    S_norm = np.asarray(S_norm, dtype=np.float64)
    if S_norm.shape[1] != len(candidates):
        raise ValueError("score matrix columns must match the candidates")
    t_hat = int(np.argmax(S_norm.sum(axis=0)))
    new_w = (1 - phi) * np.asarray(w) + phi * np.asarray(candidates[t_hat])
    return as_weighting(new_w), t_hat


# ---------------------------------------------------------------- FV round


@dataclass
class FvRecord:
    """Outcome of one FV round; ``w`` is the weighting to apply."""

    w: np.ndarray
    w_prev: np.ndarray
    candidates: list[np.ndarray]
    S: np.ndarray | None
    S_norm: np.ndarray | None
    t_hat: int
    failed: bool = False
    round: int = 0


def fv_round(snapshot: Sequence[np.ndarray], w, validators: Sequence[Validator],
             fv: FvParams, rng: np.random.Generator, round_index: int = 0) -> FvRecord:
    """Run one federated-validation round on a frozen backbone snapshot.

    If any validator raises while scoring, the round is abandoned: the
    returned record carries the unchanged ``w`` and ``failed=True``, and no
    moving statistics are touched.
    """
    w = as_weighting(w)
    n = len(snapshot)
    candidates = [w] + [sample_simplex(rng, n) for _ in range(fv.T - 1)]
    S = np.empty((len(validators), fv.T))
    try:
        for t, cand in enumerate(candidates):
            Theta_hat = params.weighted_sum(snapshot, cand)
            for i, v in enumerate(validators):
                S[i, t] = v.score(Theta_hat)
        if not np.all(np.isfinite(S)):
            raise ScoringError("validator returned a non-finite score")
    except Exception:
        return FvRecord(w, w, candidates, None, None, 0, failed=True, round=round_index)

    S_norm, new_stats = normalize(S, fv.norm, [v.stats for v in validators], fv.gamma, fv.eps)
    if fv.norm == "moving":
        for v, st in zip(validators, new_stats):
            v.stats = st
    new_w, t_hat = select_and_smooth(S_norm, candidates, w, fv.phi)
    return FvRecord(new_w, w, candidates, S, S_norm, t_hat, round=round_index)


# ------------------------------------------------------------ full search


def simplex_lattice(n: int, resolution: int) -> list[tuple[float, ...]]:
    """All points of the simplex whose coordinates are multiples of ``1/resolution``."""
    pts = []
    for combo in itertools.product(range(resolution + 1), repeat=n - 1):
        if sum(combo) <= resolution:
            pts.append(tuple(c / resolution for c in combo) + ((resolution - sum(combo)) / resolution,))
    return pts


def grid_search(snapshot: Sequence[np.ndarray], validators: Sequence[Validator],
                resolution: int) -> dict[tuple[float, ...], np.ndarray]:
    """Raw per-validator scores at every lattice weighting over three parties."""
    if len(snapshot) != 3:
        raise WeightingError(f"grid search is defined over 3 parties, got {len(snapshot)}")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    surface = {}
    for pt in simplex_lattice(3, resolution):
        Theta_hat = params.weighted_sum(snapshot, pt)
        surface[pt] = np.array([v.score(Theta_hat) for v in validators])
    return surface


def random_search(snapshot: Sequence[np.ndarray], validators: Sequence[Validator],
                  n_draws: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Best weighting among ``n_draws`` uniform samples, by summed raw score."""
    best_w, best = None, -np.inf
    for _ in range(n_draws):
        w = sample_simplex(rng, len(snapshot))
        Theta_hat = params.weighted_sum(snapshot, w)
        total = sum(v.score(Theta_hat) for v in validators)
        if total > best:
            best_w, best = w, total
    return best_w, best


# ------------------------------------------------------------------ traces


def trace_header(n_parties: int, n_validators: int, T: int) -> list[str]:
    cols = ["round", "failed", "t_hat"]
    cols += [f"cand{t}_w{i}" for t in range(T) for i in range(n_parties)]
    cols += [f"S_v{v}_c{t}" for v in range(n_validators) for t in range(T)]
    cols += [f"Snorm_v{v}_c{t}" for v in range(n_validators) for t in range(T)]
    cols += [f"w{i}" for i in range(n_parties)]
    return cols


def trace_row(rec: FvRecord, n_validators: int, T: int) -> list:
    nan = float("nan")
    S = rec.S if rec.S is not None else np.full((n_validators, T), nan)
    Sn = rec.S_norm if rec.S_norm is not None else np.full((n_validators, T), nan)
    row = [rec.round, int(rec.failed), rec.t_hat]
    row += [repr(float(x)) for c in rec.candidates for x in c]
    row += [repr(float(x)) for x in S.reshape(-1)]
    row += [repr(float(x)) for x in Sn.reshape(-1)]
    row += [repr(float(x)) for x in rec.w]
    return row


def write_trace(path, records: Sequence[FvRecord], n_parties: int, n_validators: int, T: int):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(trace_header(n_parties, n_validators, T))
        for rec in records:
            wr.writerow(trace_row(rec, n_validators, T))
