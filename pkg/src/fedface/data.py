"""Synthetic cross-silo data: Gaussian class clusters with disjoint label spaces.

Every party owns its own set of identities (classes).  Class centres are
drawn on a sphere of radius ``class_separation`` in input space and samples
are the centre plus isotropic Gaussian noise.  Besides its training set,
each party contributes a held-out validation shard (fresh samples of its own
classes, split into folds) that a validator scores models on, and an
evaluation shard drawn from an independent stream for final reporting.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import Batch
from .params import read_record, write_record

NUM_FOLDS = 5
_MAGIC = b"FFDATA1\n"
_U64 = struct.Struct("<Q")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionPlan:
    num_parties: int = 3
    classes_per_party: tuple[int, ...] = (8, 4, 4)
    samples_per_class: int = 40
    input_dim: int = 16
    class_separation: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0
    # per-party multiplier on samples_per_class; empty means all ones
    sample_scale: tuple[int, ...] = (4, 2, 1)
    val_samples_per_class: int = 100

    def __post_init__(self):
        object.__setattr__(self, "classes_per_party", tuple(int(c) for c in self.classes_per_party))
        object.__setattr__(self, "sample_scale", tuple(int(c) for c in self.sample_scale))
        if self.num_parties <= 0:
            raise DataError("num_parties must be positive")
        if len(self.classes_per_party) != self.num_parties:
            raise DataError(
                f"classes_per_party has {len(self.classes_per_party)} entries, "
                f"expected num_parties={self.num_parties}")
        if self.sample_scale and len(self.sample_scale) != self.num_parties:
            raise DataError(
                f"sample_scale has {len(self.sample_scale)} entries, "
                f"expected num_parties={self.num_parties}")
        if min(self.classes_per_party) <= 0 or min(self.sample_scale or (1,)) <= 0:
            raise DataError("class counts and sample scales must be positive")
        if self.samples_per_class <= 0 or self.input_dim <= 0:
            raise DataError("samples_per_class and input_dim must be positive")
        if self.class_separation <= 0 or self.noise_sigma <= 0:
            raise DataError("class_separation and noise_sigma must be positive")
        if self.val_samples_per_class < NUM_FOLDS:
            raise DataError(f"val_samples_per_class must be at least {NUM_FOLDS}")

    @property
    def class_offsets(self) -> list[int]:
        return [int(o) for o in np.cumsum((0,) + self.classes_per_party[:-1])]

    @property
    def total_classes(self) -> int:
        return sum(self.classes_per_party)

    def party_samples_per_class(self, i: int) -> int:
        scale = self.sample_scale[i] if self.sample_scale else 1
        return self.samples_per_class * scale


@dataclass(frozen=True)
class PartyData:
    train: Batch
    party_id: int
    global_class_offset: int
    num_classes: int

    def __len__(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class ValidationShard:
    folds: tuple[Batch, ...]
    owner: int

    def __post_init__(self):
        if len(self.folds) < 2:
            raise DataError("a validation shard needs at least two folds")

    @property
    def num_samples(self) -> int:
        return sum(len(f) for f in self.folds)


def _streams(seed: int) -> list[np.random.Generator]:
    # means, train, validation, evaluation
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def class_means(plan: PartitionPlan) -> np.ndarray:
    """Cluster centres for all ``total_classes`` global classes."""
    rng = _streams(plan.seed)[0]
    v = rng.normal(size=(plan.total_classes, plan.input_dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return plan.class_separation * v


def _draw(rng, means, classes, per_class, sigma):
    labels = np.repeat(np.arange(len(classes)), per_class)
    x = means[np.asarray(classes)][labels] + sigma * rng.normal(size=(len(labels), means.shape[1]))
    return x, labels


def _folded_shards(plan: PartitionPlan, rng: np.random.Generator, means) -> list[ValidationShard]:
    shards = []
    for i, off in enumerate(plan.class_offsets):
        n_cls = plan.classes_per_party[i]
        x, y = _draw(rng, means, range(off, off + n_cls), plan.val_samples_per_class, plan.noise_sigma)
        # stratified folds: every fold holds every class, so same-class pairs exist
        fold_of = np.empty(len(y), dtype=np.int64)
        for c in range(n_cls):
            idx = np.flatnonzero(y == c)
            fold_of[idx] = rng.permutation(np.arange(len(idx)) % NUM_FOLDS)
        folds = tuple(Batch(x[fold_of == f], y[fold_of == f]) for f in range(NUM_FOLDS))
        shards.append(ValidationShard(folds, owner=i))
    return shards


def generate(plan: PartitionPlan) -> tuple[list[PartyData], list[ValidationShard]]:
    """Training sets and validation shards for every party.

    Deterministic in ``plan.seed``: two calls with the same plan return
    bitwise identical arrays.
    """
    _, train_rng, val_rng, _ = _streams(plan.seed)
    means = class_means(plan)
    parties = []
    for i, off in enumerate(plan.class_offsets):
        n_cls = plan.classes_per_party[i]
        x, y = _draw(train_rng, means, range(off, off + n_cls),
                     plan.party_samples_per_class(i), plan.noise_sigma)
        perm = train_rng.permutation(len(y))
        parties.append(PartyData(Batch(x[perm], y[perm]), i, off, n_cls))
    return parties, _folded_shards(plan, val_rng, means)


def evaluation_shards(plan: PartitionPlan) -> list[ValidationShard]:
    """Held-out evaluation shards, disjoint in samples from validation shards."""
    eval_rng = _streams(plan.seed)[3]
    return _folded_shards(plan, eval_rng, class_means(plan))


def pooled(parties: list[PartyData]) -> tuple[Batch, np.ndarray]:
    """Union of all training sets with global labels, plus each row's party id."""
    x = np.concatenate([p.train.inputs for p in parties])
    y = np.concatenate([p.train.labels + p.global_class_offset for p in parties])
    owner = np.concatenate([np.full(len(p), p.party_id) for p in parties])
    return Batch(x, y), owner


def split_quarters(party: PartyData, seed: int) -> list[PartyData]:
    """Split one party's training set into four near-equal disjoint shards."""
    n = len(party)
    if n < 4:
        raise DataError(f"need at least 4 samples to split into quarters, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [
        PartyData(Batch(party.train.inputs[idx], party.train.labels[idx]),
                  party.party_id, party.global_class_offset, party.num_classes)
        for idx in np.array_split(perm, 4)
    ]


class BatchStream:
    """Endless stream of mini-batches over one dataset.

    Each epoch uses a fresh seeded permutation; batches are taken in order
    and a trailing partial batch is dropped.  The cursor persists between
    calls, so successive training rounds continue where the last one ended.
    """

    def __init__(self, data: Batch, batch_size: int, seed):
        if batch_size <= 0:
            raise DataError("batch_size must be positive")
        self.data = data
        self.batch_size = min(batch_size, len(data))
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(data))
        self.pos = 0
        self.epoch = 0

    def next_indices(self) -> np.ndarray:
        if self.pos + self.batch_size > len(self.order):
            self.order = self.rng.permutation(len(self.data))
            self.pos = 0
            self.epoch += 1
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx

    def next(self) -> Batch:
        idx = self.next_indices()
        return Batch(self.data.inputs[idx], self.data.labels[idx])

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": self.order.tolist(),
                "pos": self.pos, "epoch": self.epoch}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.pos = int(state["pos"])
        self.epoch = int(state["epoch"])


def _write_batch(fh, batch: Batch) -> None:
    write_record(fh, np.asarray(batch.inputs).reshape(-1) if len(batch) else np.zeros(1))
    write_record(fh, np.asarray(batch.labels, dtype=np.float64) if len(batch) else np.zeros(1))


def save_dataset(path, plan: PartitionPlan, parties, shards) -> None:
    """Write a self-describing binary dataset file.

    Layout: magic, u64 header length, JSON header (plan, per-batch row
    counts), then two ParamVec records (inputs, labels) per batch.
    """
    header = {
        "plan": asdict(plan),
        "input_dim": plan.input_dim,
        "party_rows": [len(p) for p in parties],
        "party_classes": [p.num_classes for p in parties],
        "party_offsets": [p.global_class_offset for p in parties],
        "shard_rows": [[len(f) for f in s.folds] for s in shards],
        "shard_owners": [s.owner for s in shards],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_U64.pack(len(blob)))
        fh.write(blob)
        for p in parties:
            _write_batch(fh, p.train)
        for s in shards:
            for f in s.folds:
                _write_batch(fh, f)


def load_dataset(path) -> tuple[PartitionPlan, list[PartyData], list[ValidationShard]]:
    with open(Path(path), "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise DataError(f"{path} is not a dataset file")
        (n,) = _U64.unpack(fh.read(_U64.size))
        header = json.loads(fh.read(n))
        d = header["input_dim"]

        def batch(rows):
            x, y = read_record(fh), read_record(fh)
            if rows == 0:
                return Batch(np.zeros((0, d)), np.zeros(0, dtype=np.int64))
            return Batch(np.array(x).reshape(rows, d), np.array(y).astype(np.int64))

        parties = [PartyData(batch(r), i, off, c) for i, (r, c, off) in enumerate(
            zip(header["party_rows"], header["party_classes"], header["party_offsets"]))]
        shards = [ValidationShard(tuple(batch(r) for r in rows), owner)
                  for rows, owner in zip(header["shard_rows"], header["shard_owners"])]
    return PartitionPlan(**header["plan"]), parties, shards
