"""Experiment orchestration for the five training methods.

``run`` simulates one method end to end: trainers, server and validators
only exchange messages through :class:`MessageLog`, which records every
transfer and refuses anything other than backbone parameters, global
momentum, weightings and scalar scores.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fv as fvmod
from . import params
from .config import ExperimentConfig, dump_config
from .data import BatchStream, PartyData, evaluation_shards, generate, pooled
from .fed_core import (
    LOSS_SMOOTHING, ServerState, TrainerState, aggregate_and_update_momentum, classifier_step,
    run_local_round, save_checkpoint,
)
from .model import DivergenceError, init_backbone, init_head, per_sample_loss_and_grads

ALLOWED_PAYLOADS = ("backbone", "momentum", "weighting", "score")


class LocalityError(RuntimeError):
    """A message would carry private data across a party boundary."""


@dataclass
class MessageLog:
    """Append-only record of every cross-boundary transfer.

    Each record stores the payload kind, its length and a content hash, never
    the payload itself.
    """

    backbone_len: int
    n_parties: int
    records: list[dict] = field(default_factory=list)

    def send(self, round_: int, src: str, dst: str, kind: str, value) -> None:
        if kind not in ALLOWED_PAYLOADS:
            raise LocalityError(f"payload kind {kind!r} may not cross {src} -> {dst}")
        if kind == "score":
            if np.ndim(value) != 0:
                raise LocalityError("scores must be scalars")
            digest, length = repr(float(value)), 1
        else:
            arr = np.asarray(value, dtype=np.float64)
            expected = self.n_parties if kind == "weighting" else self.backbone_len
            if arr.ndim != 1 or arr.size != expected:
                raise LocalityError(f"{kind} payload of length {arr.size}, expected {expected}")
            digest, length = hashlib.sha256(arr.tobytes()).hexdigest()[:16], arr.size
        self.records.append({"round": round_, "src": src, "dst": dst, "kind": kind,
                             "len": length, "digest": digest})

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class RoundMetrics:
    round: int
    losses: list[float]
    w: np.ndarray
    wall_time: float
    eta: float
    scores: list[float] | None = None


@dataclass
class RunResult:
    config: ExperimentConfig
    server: ServerState
    trainers: list[TrainerState]
    metrics: list[RoundMetrics]
    fv_records: list[fvmod.FvRecord]
    events: MessageLog
    eval_scores: list[float]
    party_sizes: list[int]
    trajectory: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    centralized_loss: float | None = None

    @property
    def final_losses(self) -> list[float]:
        return self.metrics[-1].losses

    @property
    def aggregate_loss(self) -> float:
        """Training-set-size weighted mean of the final smoothed losses."""
        if self.centralized_loss is not None:
            return self.centralized_loss
        sizes = np.asarray(self.party_sizes, dtype=np.float64)
        return float(np.dot(sizes / sizes.sum(), self.final_losses))


def _seed_streams(cfg: ExperimentConfig, n: int):
    init = np.random.SeedSequence(cfg.seeds.init).spawn(n + 1)
    batching = np.random.SeedSequence(cfg.seeds.batching).spawn(n)
    fv_children = np.random.SeedSequence(cfg.seeds.fv).spawn(n + 1)
    return init, batching, fv_children


def initial_weighting(cfg: ExperimentConfig, parties: list[PartyData]) -> np.ndarray:
    if cfg.weighting_init == "uniform":
        return fvmod.as_weighting(np.ones(len(parties)))
    return fvmod.as_weighting([len(p) for p in parties])


def build_validators(cfg: ExperimentConfig, shards, rng_seeds=None) -> list[fvmod.ValidatorState]:
    if rng_seeds is None:
        rng_seeds = np.random.SeedSequence(cfg.seeds.fv).spawn(len(shards) + 1)[1:]
    if cfg.fv.scorer != "verification":
        raise ValueError("simulated validators score by verification; "
                         "accuracy scoring needs a reference head per validator")
    return [fvmod.ValidatorState.build(i, s, cfg.backbone, np.random.default_rng(seed),
                                       cfg.fv.pairs_per_fold)
            for i, (s, seed) in enumerate(zip(shards, rng_seeds))]


def build_evaluators(cfg: ExperimentConfig, eval_shards) -> list[fvmod.ValidatorState]:
    seeds = np.random.SeedSequence([cfg.seeds.data, 7]).spawn(len(eval_shards))
    return [fvmod.ValidatorState.build(i, s, cfg.backbone, np.random.default_rng(seed),
                                       cfg.fv.pairs_per_fold)
            for i, (s, seed) in enumerate(zip(eval_shards, seeds))]


def run(cfg: ExperimentConfig, out_dir=None, threads: int | None = None,
        record_trajectory: bool = False, data=None, on_round=None) -> RunResult:
    """Execute one experiment; optionally write its artifacts to ``out_dir``.

    ``on_round(r, server, trainers)`` is called after every aggregation of a
    federated run.  With ``out_dir`` set and ``cfg.checkpoint_every > 0``,
    checkpoints are also written every that many rounds.

    Raises:
        DivergenceError: naming the round in which loss or parameters became
            non-finite.
    """
    if data is None:
        parties, shards = generate(cfg.data)
        eval_sh = evaluation_shards(cfg.data)
    else:
        parties, shards, eval_sh = data
    threads = threads or cfg.threads
    if out_dir is not None and cfg.checkpoint_every and cfg.method != "centralized":
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        user_hook = on_round

        def on_round(r, server, trainers):
            if r % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"round_{r:05d}.ckpt", server, trainers,
                                extra={"method": cfg.method})
            if user_hook is not None:
                user_hook(r, server, trainers)

    if cfg.method == "centralized":
        result = _run_centralized(cfg, parties, eval_sh, record_trajectory)
    else:
        result = _run_federated(cfg, parties, shards, eval_sh, threads, record_trajectory,
                                on_round)
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


def _evaluate(evaluators, Theta) -> list[float]:
    return [e.score(Theta) for e in evaluators]


def _run_federated(cfg, parties, shards, eval_sh, threads, record_trajectory,
                   on_round=None) -> RunResult:
    hp, n = cfg.hyper, len(parties)
    init, batching, fv_children = _seed_streams(cfg, n)
    Theta0 = init_backbone(cfg.backbone, np.random.default_rng(init[0]))
    head_specs = [cfg.head.spec(cfg.backbone.feature_dim, p.num_classes) for p in parties]
    trainers = []
    for p, hs, iseed, bseed in zip(parties, head_specs, init[1:], batching):
        omega = init_head(hs, np.random.default_rng(iseed))
        trainers.append(TrainerState(p.party_id, Theta0, omega, params.zeros(omega.size),
                                     BatchStream(p.train, hp.batch_size, bseed)))
    server = ServerState.initial(Theta0, initial_weighting(cfg, parties))
    log = MessageLog(Theta0.size, n)
    evaluators = build_evaluators(cfg, eval_sh)

    validators, fv_rng = [], None
    if cfg.fv_enabled:
        fv_rng = np.random.default_rng(fv_children[0])
        validators = build_validators(cfg, shards, fv_children[1:])
    pending: dict[int, np.ndarray] = {}
    fv_records, metrics, trajectory = [], [], []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def local(args):
        trainer, hs, eta = args
        return run_local_round(trainer, server.Theta, server.M_Theta, hp, cfg.local_mode,
                               cfg.backbone, hs, eta)

    try:
        for r in range(1, hp.R + 1):
            t0 = time.perf_counter()
            eta = hp.eta(r)
            for t in trainers:
                log.send(r, "server", f"trainer{t.party_id}", "backbone", server.Theta)
                if cfg.local_mode == "pfm":
                    log.send(r, "server", f"trainer{t.party_id}", "momentum", server.M_Theta)
            jobs = [(t, hs, eta) for t, hs in zip(trainers, head_specs)]
            try:
                trainers = list(pool.map(local, jobs)) if pool else [local(j) for j in jobs]
            except DivergenceError as exc:
                raise DivergenceError(f"round {r}: {exc}") from exc
            for t in trainers:
                log.send(r, f"trainer{t.party_id}", "server", "backbone", t.theta)
            if r in pending:
                server = ServerState(server.Theta, server.M_Theta, pending.pop(r), server.round)
            try:
                server = aggregate_and_update_momentum(server, [t.theta for t in trainers],
                                                       eta, hp.beta)
            except DivergenceError as exc:
                raise DivergenceError(f"round {r}: {exc}") from exc
            if record_trajectory:
                trajectory.append((server.Theta, server.M_Theta))
            if on_round is not None:
                on_round(r, server, trainers)

            if cfg.fv_enabled and r % cfg.fv.fv_every == 0 and r + cfg.fv.fv_every <= hp.R:
                snapshot = [t.theta for t in trainers]
                rec = _logged_fv_round(snapshot, server.w, validators, cfg.fv, fv_rng, r, log)
                fv_records.append(rec)
                pending[r + cfg.fv.fv_every] = rec.w

            scores = None
            if cfg.eval_every and (r % cfg.eval_every == 0 or r == hp.R):
                scores = _evaluate(evaluators, server.Theta)
            metrics.append(RoundMetrics(r, [t.smoothed_loss for t in trainers], server.w,
                                        time.perf_counter() - t0, eta, scores))
    finally:
        if pool:
            pool.shutdown()

    return RunResult(cfg, server, trainers, metrics, fv_records, log,
                     _evaluate(evaluators, server.Theta), [len(p) for p in parties], trajectory)


class _LoggedValidator:
    """Routes a validator's traffic through the message log."""

    def __init__(self, inner, log: MessageLog, round_: int):
        self.inner, self.log, self.round = inner, log, round_

    @property
    def stats(self):
        return self.inner.stats

    @stats.setter
    def stats(self, value):
        self.inner.stats = value

    def score(self, Theta_hat):
        name = f"validator{self.inner.validator_id}"
        self.log.send(self.round, "server", name, "backbone", Theta_hat)
        s = self.inner.score(Theta_hat)
        self.log.send(self.round, name, "server", "score", s)
        return s


def _logged_fv_round(snapshot, w, validators, fvp, rng, r, log):
    wrapped = [_LoggedValidator(v, log, r) for v in validators]
    return fvmod.fv_round(snapshot, w, wrapped, fvp, rng, round_index=r)


def _run_centralized(cfg, parties, eval_sh, record_trajectory) -> RunResult:
    """Classical momentum-SGD on the pooled data with one head over all classes.

    Uses the same step budget ``R*K`` and per-round learning rates as the
    federated methods, and the first trainer's seed streams, so that with a
    single party it retraces the federated run exactly.
    """
    hp, n = cfg.hyper, len(parties)
    init, batching, _ = _seed_streams(cfg, n)
    data, owner = pooled(parties)
    total_classes = sum(p.num_classes for p in parties)
    hs = cfg.head.spec(cfg.backbone.feature_dim, total_classes)
    theta = init_backbone(cfg.backbone, np.random.default_rng(init[0]))
    omega = init_head(hs, np.random.default_rng(init[1]))
    M_theta, M_omega = params.zeros(theta.size), params.zeros(omega.size)
    stream = BatchStream(data, hp.batch_size, batching[0])
    sizes = [len(p) for p in parties]
    w = initial_weighting(cfg, parties)
    evaluators = build_evaluators(cfg, eval_sh)

    smoothed = [float("nan")] * n
    overall = float("nan")
    metrics, trajectory = [], []

    def ema(old, new):
        return new if np.isnan(old) else LOSS_SMOOTHING * old + (1 - LOSS_SMOOTHING) * new

    for r in range(1, hp.R + 1):
        t0 = time.perf_counter()
        eta = hp.eta(r)
        for _ in range(hp.K):
            idx = stream.next_indices()
            batch = type(data)(data.inputs[idx], data.labels[idx])
            try:
                losses, (loss, g, h) = per_sample_loss_and_grads(cfg.backbone, hs, theta, omega, batch)
            except DivergenceError as exc:
                raise DivergenceError(f"round {r}: {exc}") from exc
            overall = ema(overall, loss)
            for i in range(n):
                mask = owner[idx] == i
                if mask.any():
                    smoothed[i] = ema(smoothed[i], float(np.mean(losses[mask])))
            theta, M_theta = classifier_step(theta, M_theta, g, hp.beta, eta)
            omega, M_omega = classifier_step(omega, M_omega, h, hp.beta, eta)
        if record_trajectory:
            trajectory.append((theta, M_theta))
        scores = None
        if cfg.eval_every and (r % cfg.eval_every == 0 or r == hp.R):
            scores = _evaluate(evaluators, theta)
        metrics.append(RoundMetrics(r, list(smoothed), w, time.perf_counter() - t0, eta, scores))

    server = ServerState(theta, M_theta, w, hp.R)
    trainer = TrainerState(-1, theta, omega, M_omega, stream, overall, overall)
    return RunResult(cfg, server, [trainer], metrics, [], MessageLog(theta.size, n),
                     _evaluate(evaluators, theta), sizes, trajectory, centralized_loss=overall)


# ------------------------------------------------------------------ outputs

METRICS_COLUMNS = ["round", "party", "loss", "eta"]


def metrics_header(n_parties: int) -> list[str]:
    return METRICS_COLUMNS + [f"w{i}" for i in range(n_parties)] + ["score"]


def write_metrics(path, metrics: list[RoundMetrics], n_parties: int) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(metrics_header(n_parties))
        for m in metrics:
            for i, loss in enumerate(m.losses):
                score = "" if m.scores is None else repr(float(m.scores[i]))
                wr.writerow([m.round, i, repr(float(loss)), repr(float(m.eta))]
                            + [repr(float(x)) for x in m.w] + [score])


def write_outputs(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    n = len(result.party_sizes)
    (out / "config.yaml").write_text(dump_config(cfg))
    write_metrics(out / "metrics.csv", result.metrics, n)
    result.events.write(out / "events.jsonl")
    if cfg.fv_enabled:
        fvmod.write_trace(out / "fv_trace.csv", result.fv_records, n, n, cfg.fv.T)
    save_checkpoint(out / "final.ckpt", result.server, result.trainers,
                    extra={"method": cfg.method})


# ------------------------------------------------------------------ compare

COMPARED = ("centralized", "fedavg", "fedavg_fv", "pfm", "pfm_fv")


@dataclass
class Comparison:
    scores: dict[str, list[float]]
    losses: dict[str, float]

    def deltas(self, baseline: str = "centralized") -> dict[str, list[float]]:
        base = np.asarray(self.scores[baseline])
        return {m: list(np.asarray(s) - base) for m, s in self.scores.items()}

    def rows(self, baseline: str = "centralized") -> list[dict]:
        out = []
        for m, d in self.deltas(baseline).items():
            for shard, (score, delta) in enumerate(zip(self.scores[m], d)):
                out.append({"method": m, "shard": shard, "score": score, "delta": delta,
                            "final_loss": self.losses[m]})
        return out


def compare(cfg: ExperimentConfig, methods=COMPARED, out_dir=None, threads=None) -> Comparison:
    """Run every method on identical data and seeds and collect final scores."""
    data = (*generate(cfg.data), evaluation_shards(cfg.data))
    scores, losses = {}, {}
    for m in methods:
        sub = None if out_dir is None else Path(out_dir) / m
        res = run(cfg.replace(method=m), out_dir=sub, threads=threads, data=data)
        scores[m] = res.eval_scores
        losses[m] = res.aggregate_loss
    return Comparison(scores, losses)


def write_comparison(path, comp: Comparison) -> None:
    rows = comp.rows()
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["method", "shard", "score", "delta", "final_loss"],
                            lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                         for k, v in row.items()})
