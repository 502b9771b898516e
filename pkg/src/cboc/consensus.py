"""Doubly-stochastic consensus matrices: construction, schedules and repair.

Client indices are 0-based throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMES = ("uniform", "leader", "identity")
DS_TOL = 1e-9


class ConsensusError(ValueError):
    pass


class RepairError(ConsensusError):
    """Sinkhorn repair could not reach a doubly-stochastic matrix."""


def check_consensus_matrix(W: np.ndarray, tol: float = DS_TOL) -> None:
    """Raise :class:`ConsensusError` unless ``W`` is symmetric, non-negative, doubly stochastic."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ConsensusError(f"consensus matrix must be square, got shape {W.shape}")
    if np.any(W < 0):
        raise ConsensusError(f"negative entry {W.min():.3g}")
    dev = max(np.abs(W.sum(axis=0) - 1).max(), np.abs(W.sum(axis=1) - 1).max())
    if dev > tol:
        raise ConsensusError(f"row/column sums deviate from 1 by {dev:.3g}")
    asym = np.abs(W - W.T).max()
    if asym > tol:
        raise ConsensusError(f"matrix asymmetric by {asym:.3g}")


def is_consensus_matrix(W: np.ndarray, tol: float = DS_TOL) -> bool:
    try:
        check_consensus_matrix(W, tol)
    except ConsensusError:
        return False
    return True


def init_uniform(n_clients: int) -> np.ndarray:
    if n_clients < 1:
        raise ConsensusError("need at least one client")
    return np.full((n_clients, n_clients), 1.0 / n_clients)


def repair_doubly_stochastic(
    W: np.ndarray, tol: float = 1e-10, max_iter: int = 1000
) -> np.ndarray:
    """Clamp negatives to zero and run symmetric Sinkhorn scaling.

    Alternates row and column normalisation, symmetrising after each pass,
    until every row and column sum is within ``tol`` of one.
    """
    W = np.clip(np.asarray(W, dtype=float), 0.0, None)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise RepairError(f"matrix must be square, got shape {W.shape}")
    if np.any(W.sum(axis=1) <= 0) or np.any(W.sum(axis=0) <= 0):
        raise RepairError("matrix has an all-zero row or column")

    def deviation(M: np.ndarray) -> float:
        return max(np.abs(M.sum(axis=0) - 1).max(), np.abs(M.sum(axis=1) - 1).max())

    if deviation(W) <= tol and np.abs(W - W.T).max() <= tol:
        return W
    for _ in range(max_iter):
        W = W / W.sum(axis=1, keepdims=True)
        W = W / W.sum(axis=0, keepdims=True)
        W = 0.5 * (W + W.T)
        if deviation(W) <= tol:
            return W
    raise RepairError(f"Sinkhorn did not converge in {max_iter} iterations (dev={deviation(W):.3g})")


def _clamp_and_repair(W: np.ndarray) -> np.ndarray:
    clamped = np.clip(W, 0.0, 1.0)
    if np.array_equal(clamped, W):
        return W
    return repair_doubly_stochastic(clamped)


def uniform_step(W: np.ndarray, n_clients: int, horizon: int) -> np.ndarray:
    """Move ``W`` one linear step toward the identity (diag up, off-diag down)."""
    if horizon < 1:
        raise ConsensusError("horizon must be >= 1")
    K = n_clients
    delta = np.full((K, K), -1.0 / (horizon * K))
    np.fill_diagonal(delta, (K - 1) / (horizon * K))
    return _clamp_and_repair(np.asarray(W, dtype=float) + delta)


def select_leader(rewards, prev_leader: int | None = None) -> int:
    """Highest reward wins (lowest index on ties); a repeat leader yields to the runner-up."""
    rewards = np.asarray(rewards, dtype=float)
    order = np.lexsort((np.arange(rewards.size), -rewards))
    if prev_leader is not None and order[0] == prev_leader and rewards.size > 1:
        return int(order[1])
    return int(order[0])


def leader_block_update(W1: np.ndarray, leader: int, n_clients: int, horizon: int) -> np.ndarray:
    """Raw (unclamped) leader tilt of ``W1``; row and column sums are unchanged."""
    K, T = n_clients, horizon
    up = (K - 1) / (T * K)
    down = 1.0 / (T * K)
    W2 = np.asarray(W1, dtype=float) - down
    W2[leader, :] = W1[leader, :] + up
    W2[:, leader] = W1[:, leader] + up
    W2[leader, leader] = W1[leader, leader] - (K - 1) ** 2 / (T * K)
    return W2


def leader_step(
    W1: np.ndarray,
    rewards,
    prev_leader: int | None,
    n_clients: int,
    horizon: int,
) -> tuple[np.ndarray, int]:
    """Tilt the baseline ``W1`` toward the round's leader.

    Returns the tilted matrix and the leader index. Negative entries from the
    tilt are clamped to zero and the result is Sinkhorn-repaired.
    """
    if n_clients < 2:
        raise ConsensusError("leader-driven consensus needs at least two clients")
    if horizon < 2:
        # with T = 1 the tilt empties every non-leader entry except the leader column
        raise ConsensusError("leader-driven consensus needs a horizon of at least 2")
    if len(rewards) != n_clients:
        raise ConsensusError(f"expected {n_clients} rewards, got {len(rewards)}")
    leader = select_leader(rewards, prev_leader)
    return _clamp_and_repair(leader_block_update(W1, leader, n_clients, horizon)), leader


def consensus_combine(W: np.ndarray, x_all: np.ndarray) -> np.ndarray:
    """Apply ``(W kron I_D)`` to the stacked client points; returns ``(K, D)``."""
    W = np.asarray(W, dtype=float)
    X = np.asarray(x_all, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if W.shape != (X.shape[0], X.shape[0]):
        raise ConsensusError(f"W has shape {W.shape} but {X.shape[0]} points were given")
    return W @ X


def mask_disconnected(W: np.ndarray, adjacency: np.ndarray) -> np.ndarray:
    """Zero weights between unconnected clients and re-balance."""
    A = np.asarray(adjacency, dtype=bool)
    if A.shape != np.shape(W):
        raise ConsensusError(f"adjacency shape {A.shape} does not match W {np.shape(W)}")
    if not np.array_equal(A, A.T) or not np.all(np.diag(A)):
        raise ConsensusError("adjacency must be symmetric with a true diagonal")
    if A.all():
        return np.asarray(W, dtype=float)
    return repair_doubly_stochastic(np.where(A, W, 0.0))


@dataclass
class ConsensusScheme:
    """Which schedule produces ``W^(t)``, over how many iterations, on which graph."""

    kind: str
    horizon: int
    adjacency: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCHEMES:
            raise ConsensusError(f"scheme kind must be one of {SCHEMES}, got {self.kind!r}")
        if self.horizon < 1:
            raise ConsensusError("horizon must be >= 1")
        if self.kind == "leader" and self.horizon < 2:
            raise ConsensusError("leader-driven scheme needs horizon >= 2")
        if self.adjacency is not None:
            A = np.asarray(self.adjacency, dtype=bool)
            if not np.array_equal(A, A.T) or not np.all(np.diag(A)):
                raise ConsensusError("adjacency must be symmetric with a true diagonal")
            self.adjacency = A

    def start(self, n_clients: int) -> ConsensusSchedule:
        return ConsensusSchedule(self, n_clients)


@dataclass
class ConsensusSchedule:
    """Per-run matrix state; call :meth:`next` once per iteration."""

    scheme: ConsensusScheme
    n_clients: int
    t: int = 0
    baseline: np.ndarray = field(init=False)
    prev_leader: int | None = None

    def __post_init__(self) -> None:
        if self.scheme.adjacency is not None and self.scheme.adjacency.shape != (
            self.n_clients,
            self.n_clients,
        ):
            raise ConsensusError("adjacency size does not match the number of clients")
        self.baseline = init_uniform(self.n_clients)

    def next(self, rewards=None) -> tuple[np.ndarray, int]:
        """Matrix for the current iteration and its leader (``-1`` if none), then advance."""
        K, T = self.n_clients, self.scheme.horizon
        leader = -1
        if self.scheme.kind == "identity" or K == 1 or self.t >= T:
            W = np.eye(K)
        elif self.scheme.kind == "uniform":
            W = self.baseline
        else:
            if rewards is None:
                raise ConsensusError("leader-driven scheme needs rewards every round")
            W, leader = leader_step(self.baseline, rewards, self.prev_leader, K, T)
            self.prev_leader = leader
        if self.scheme.adjacency is not None:
            W = mask_disconnected(W, self.scheme.adjacency)
        if self.t < T:
            self.baseline = uniform_step(self.baseline, K, T)
        self.t += 1
        return W.copy(), leader


def write_matrices_csv(path: str | Path, matrices, run_ids=None) -> None:
    """Long-format CSV ``run,iteration,row,col,weight`` at full float precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "iteration", "row", "col", "weight"])
        for r, stack in enumerate(matrices):
            run = r if run_ids is None else run_ids[r]
            for t, W in enumerate(stack):
                for i in range(W.shape[0]):
                    for j in range(W.shape[1]):
                        writer.writerow([run, t, i, j, repr(float(W[i, j]))])


def read_matrices_csv(path: str | Path) -> dict[tuple[int, int], np.ndarray]:
    rows: dict[tuple[int, int], dict[tuple[int, int], float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            key = (int(rec["run"]), int(rec["iteration"]))
            rows.setdefault(key, {})[(int(rec["row"]), int(rec["col"]))] = float(rec["weight"])
    out = {}
    for key, entries in rows.items():
        K = max(i for i, _ in entries) + 1
        W = np.zeros((K, K))
        for (i, j), w in entries.items():
            W[i, j] = w
        out[key] = W
    return out
