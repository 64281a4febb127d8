"""Trainer-side local loops and server-side aggregation.

Two local update rules are supported for the shared backbone:

* ``fedavg``: plain SGD on the local gradient.
* ``pfm``: SGD on the local gradient plus the server's global momentum,
  spread evenly over the ``K`` local steps (``beta * M / K`` per step).

Heads always use classical momentum and never leave the trainer.  After a
round the server averages the local backbones with the current weighting
and re-estimates the global momentum from the displacement of the global
backbone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import params
from .data import BatchStream
from .model import BackboneSpec, DivergenceError, HeadSpec, per_sample_loss_and_grads

MODES = ("fedavg", "pfm")
LOSS_SMOOTHING = 0.99
_MAGIC = b"FFCKPT1\n"
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class HyperParams:
    R: int = 200
    K: int = 50
    beta: float = 0.9
    lr: float = 0.1
    lr_decay_at: tuple[float, ...] = (0.4, 0.7, 0.92)
    lr_decay_factor: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_at", tuple(float(f) for f in self.lr_decay_at))
        if self.R <= 0 or self.K <= 0 or self.batch_size <= 0:
            raise ValueError("R, K and batch_size must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.lr <= 0 or not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr must be positive and lr_decay_factor in (0, 1]")
        if any(not 0.0 < f < 1.0 for f in self.lr_decay_at):
            raise ValueError("lr_decay_at entries are fractions of R in (0, 1)")

    def eta(self, r: int) -> float:
        """Learning rate of round ``r`` (1-based); decays after each boundary round."""
        n_decays = sum(1 for f in self.lr_decay_at if r > f * self.R)
        return self.lr * self.lr_decay_factor ** n_decays


@dataclass
class TrainerState:
    party_id: int
    theta: np.ndarray
    omega: np.ndarray
    M_omega: np.ndarray
    stream: BatchStream
    smoothed_loss: float = float("nan")
    last_loss: float = float("nan")

    def observe_loss(self, loss: float) -> None:
        if np.isnan(self.smoothed_loss):
            self.smoothed_loss = loss
        else:
            self.smoothed_loss = LOSS_SMOOTHING * self.smoothed_loss + (1 - LOSS_SMOOTHING) * loss
        self.last_loss = loss


@dataclass(frozen=True, eq=False)
class ServerState:
    Theta: np.ndarray
    M_Theta: np.ndarray
    w: np.ndarray
    round: int = 0
    G: np.ndarray | None = None

    @classmethod
    def initial(cls, Theta, w) -> "ServerState":
        Theta = params.as_paramvec(Theta)
        return cls(Theta, params.zeros(Theta.size), params.as_paramvec(w))


def classifier_step(omega, M_omega, h, beta: float, eta: float):
    """Classical momentum on the head: ``M = beta*M + h``, ``omega -= eta*M``."""
    M_new = params.axpy(beta, M_omega, h)
    return params.axpy(-eta, M_new, omega), M_new


def backbone_step_pfm(theta, g, beta: float, eta: float, M_Theta_prev, K: int):
    """One local backbone step with the global momentum applied in ``1/K`` slices.

    With ``M_Theta_prev`` all zero (or ``beta == 0``) this is the plain SGD
    step used by FedAvg.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    direction = params.axpy(beta / K, M_Theta_prev, g)
    return params.axpy(-eta, direction, theta)


def run_local_round(trainer: TrainerState, Theta, M_Theta, hp: HyperParams, mode: str,
                    b_spec: BackboneSpec, h_spec: HeadSpec, eta: float) -> TrainerState:
    """Reset the local backbone to ``Theta`` and take ``hp.K`` local steps.

    The head and its momentum carry over from earlier rounds; only
    ``trainer.theta`` is meant to be sent back to the server.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    momentum = M_Theta if mode == "pfm" else np.zeros_like(M_Theta)
    theta = Theta
    omega, M_omega = trainer.omega, trainer.M_omega
    for _ in range(hp.K):
        batch = trainer.stream.next()
        _, (loss, g, h) = per_sample_loss_and_grads(b_spec, h_spec, theta, omega, batch)
        trainer.observe_loss(loss)
        theta = backbone_step_pfm(theta, g, hp.beta, eta, momentum, hp.K)
        omega, M_omega = classifier_step(omega, M_omega, h, hp.beta, eta)
    trainer.theta, trainer.omega, trainer.M_omega = theta, omega, M_omega
    return trainer


def aggregate_and_update_momentum(server: ServerState, theta_list: Sequence[np.ndarray],
                                  eta_r: float, beta: float) -> ServerState:
    """Weighted aggregation of local backbones and global momentum estimate.

    The equivalent global gradient removes the learning rate and the
    momentum that trainers already applied locally::

        G = (Theta_old - Theta_new) / eta_r - beta * M_old
        M_new = beta * M_old + G = (Theta_old - Theta_new) / eta_r

    ``M_new`` is computed from the closed form on the right.
    """
    if not eta_r > 0:
        raise ValueError(f"learning rate must be positive, got {eta_r}")
    if len(theta_list) != len(server.w):
        raise params.ParamError(f"{len(theta_list)} backbones for {len(server.w)} weights")
    Theta_new = params.weighted_sum(theta_list, server.w)
    with np.errstate(over="ignore", invalid="ignore"):
        M_new = (server.Theta - Theta_new) / eta_r
        G = M_new - beta * server.M_Theta
    if not (np.all(np.isfinite(M_new)) and np.all(np.isfinite(G))):
        raise DivergenceError(f"non-finite global momentum after round {server.round + 1}")
    return replace(server, Theta=Theta_new, M_Theta=params.as_paramvec(M_new, copy=False),
                   G=params.as_paramvec(G, copy=False), round=server.round + 1)


def save_checkpoint(path, server: ServerState, trainers: Sequence[TrainerState],
                    extra: dict | None = None) -> None:
    """Write server and trainer state.

    Layout: magic, u64 header length, JSON header, then ParamVec records in
    the order ``Theta, M_Theta, w`` followed by ``theta, omega, M_omega`` for
    each trainer in ascending party id.
    """
    header = {
        "round": server.round,
        "num_trainers": len(trainers),
        "party_ids": [t.party_id for t in trainers],
        "smoothed_loss": [t.smoothed_loss for t in trainers],
        "streams": [t.stream.state() for t in trainers],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_U64.pack(len(blob)))
        fh.write(blob)
        for v in (server.Theta, server.M_Theta, server.w):
            params.write_record(fh, v)
        for t in trainers:
            for v in (t.theta, t.omega, t.M_omega):
                params.write_record(fh, v)


@dataclass
class Checkpoint:
    round: int
    Theta: np.ndarray
    M_Theta: np.ndarray
    w: np.ndarray
    thetas: list[np.ndarray]
    omegas: list[np.ndarray]
    M_omegas: list[np.ndarray]
    header: dict

    @property
    def server(self) -> ServerState:
        return ServerState(self.Theta, self.M_Theta, self.w, self.round)


def load_checkpoint(path) -> Checkpoint:
    with open(Path(path), "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = _U64.unpack(fh.read(_U64.size))
        header = json.loads(fh.read(n))
        Theta, M_Theta, w = (params.read_record(fh) for _ in range(3))
        thetas, omegas, M_omegas = [], [], []
        for _ in range(header["num_trainers"]):
            thetas.append(params.read_record(fh))
            omegas.append(params.read_record(fh))
            M_omegas.append(params.read_record(fh))
    return Checkpoint(header["round"], Theta, M_Theta, w, thetas, omegas, M_omegas, header)
