"""The collaborative round loop: per-client BO coordinated by a consensus matrix.

Only ``(candidate design, reward)`` pairs ever leave a client. Responses
stay in the client's own :class:`~cboc.gp.Dataset`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .acquisition import AcquisitionConfig, maximize_utility
from .benchmarks import BlackBoxProblem, ei_stopping, gap_metric, observe
from .consensus import ConsensusScheme, consensus_combine
from .gp import Dataset, GPError, GPHyperparameters, fit_surrogate

log = logging.getLogger(__name__)

TOPOLOGIES = ("centralized", "decentralized")
STAGES = {"init": 0, "fit": 1, "acq": 2, "noise": 3, "hetero": 4}


class RunAborted(RuntimeError):
    """A client could not fit its surrogate; the run cannot continue."""


class StalledRoundError(RuntimeError):
    """Not every client's message arrived before the barrier gave up."""


def stream(master_seed: int, run: int, client: int, stage: str) -> np.random.Generator:
    """Independent generator keyed by ``(master_seed, run, client, stage)``."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(run), int(client), STAGES[stage]))
    return np.random.default_rng(seq)


@dataclass(frozen=True)
class RoundMessage:
    sender: int
    candidate: np.ndarray
    reward: float


def _deliver(queue: list[RoundMessage], n_clients: int, max_ticks: int) -> dict[int, RoundMessage]:
    inbox: dict[int, RoundMessage] = {}
    for tick, msg in enumerate(queue):
        if tick >= max_ticks:
            break
        if not 0 <= msg.sender < n_clients:
            raise ValueError(f"message from unknown client {msg.sender}")
        if msg.sender in inbox:
            raise ValueError(f"duplicate message from client {msg.sender}")
        if not (np.all(np.isfinite(msg.candidate)) and np.isfinite(msg.reward)):
            raise ValueError(f"non-finite message from client {msg.sender}")
        inbox[msg.sender] = msg
    missing = sorted(set(range(n_clients)) - set(inbox))
    if missing:
        raise StalledRoundError(f"barrier timed out waiting for clients {missing}")
    return inbox


def _assemble(inbox: dict[int, RoundMessage]) -> tuple[np.ndarray, np.ndarray]:
    ids = sorted(inbox)
    return (
        np.vstack([np.asarray(inbox[k].candidate, dtype=float) for k in ids]),
        np.array([inbox[k].reward for k in ids], dtype=float),
    )


def exchange_round(
    messages,
    n_clients: int,
    topology: str = "centralized",
    *,
    max_ticks: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gather one message per client into id-ordered ``(x_C, rewards)``.

    ``centralized`` routes everything through one orchestrator inbox;
    ``decentralized`` broadcasts to every client, each of which assembles the
    vectors itself (optionally with its own ``rng``-shuffled delivery order).
    Each inbox processes one delivery per tick and gives up after
    ``max_ticks`` (default ``n_clients``).
    """
    if topology not in TOPOLOGIES:
        raise ValueError(f"topology must be one of {TOPOLOGIES}")
    messages = list(messages)
    ticks = n_clients if max_ticks is None else max_ticks

    def delivery_order() -> list[RoundMessage]:
        if rng is None:
            return list(messages)
        return [messages[i] for i in rng.permutation(len(messages))]

    if topology == "centralized":
        return _assemble(_deliver(delivery_order(), n_clients, ticks))
    views = [_assemble(_deliver(delivery_order(), n_clients, ticks)) for _ in range(n_clients)]
    x_C, rewards = views[0]
    for other_x, other_r in views[1:]:
        if not (np.array_equal(other_x, x_C) and np.array_equal(other_r, rewards)):
            raise RuntimeError("decentralized views disagree")
    return x_C, rewards


@dataclass
class ClientState:
    """One client's private state. ``data`` never leaves this object."""

    id: int
    problem: BlackBoxProblem
    data: Dataset
    streams: dict[str, np.random.Generator]
    acq: AcquisitionConfig
    hyper: GPHyperparameters | None = None
    last_candidate: np.ndarray | None = None
    last_reward: float = float("nan")
    stopped: bool = False

    @classmethod
    def initial(
        cls,
        client_id: int,
        problem: BlackBoxProblem,
        n_init: int,
        acq: AcquisitionConfig,
        master_seed: int,
        run: int,
    ) -> ClientState:
        streams = {stage: stream(master_seed, run, client_id, stage) for stage in ("init", "fit", "acq", "noise")}
        lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
        X0 = streams["init"].uniform(lo, hi, size=(n_init, problem.dim))
        y0 = [observe(problem, x, streams["noise"]) for x in X0]
        return cls(client_id, problem, Dataset(X0, y0), streams, acq)

    def propose(self) -> RoundMessage:
        """Refit the surrogate and maximise the utility; returns the message to share."""
        try:
            surrogate = fit_surrogate(self.data, self.problem.bounds, self.streams["fit"])
        except GPError as exc:
            raise RunAborted(f"client {self.id}: surrogate fit failed with N={self.data.n}: {exc}") from exc
        unit = np.column_stack([np.zeros(self.problem.dim), np.ones(self.problem.dim)])
        incumbent = float(np.max(surrogate.data.responses))
        x_unit, value = maximize_utility(
            surrogate.data, surrogate.hyper, incumbent, unit, self.acq, self.streams["acq"]
        )
        self.hyper = surrogate.hyper
        self.last_candidate = np.clip(surrogate.from_unit(x_unit), self.problem.bounds[:, 0], self.problem.bounds[:, 1])
        self.last_reward = value * surrogate.y_std
        return RoundMessage(self.id, self.last_candidate.copy(), self.last_reward)

    def experiment(self, x_new: np.ndarray) -> float:
        y = observe(self.problem, x_new, self.streams["noise"])
        self.data = self.data.append(x_new, y)
        return y


@dataclass
class RunHistory:
    """Everything recorded during one run; arrays are indexed ``[client, iteration]``."""

    consensus_points: np.ndarray  # (K, T, D)
    observations: np.ndarray  # (K, T)
    values: np.ndarray  # (K, T) noise-free
    incumbents: np.ndarray  # (K, T)
    regret: np.ndarray  # (K, T)
    gap: np.ndarray  # (K, T)
    initial_best: np.ndarray  # (K,)
    y_star: np.ndarray  # (K,)
    candidates: np.ndarray  # (T, K, D) shared designs x^(t)
    rewards: np.ndarray  # (T, K)
    matrices: np.ndarray  # (T, K, K)
    leaders: np.ndarray  # (T,)
    hypers: np.ndarray  # (K, T + 1, 3): (u^2, lengthscale, noise_sd) per fit
    datasets: list[Dataset] = field(repr=False)
    messages: list[list[RoundMessage]] = field(repr=False)
    stopped_at: np.ndarray = None  # (K,), -1 if never stopped

    @property
    def n_clients(self) -> int:
        return self.observations.shape[0]

    @property
    def horizon(self) -> int:
        return self.observations.shape[1]

    @property
    def final_gap(self) -> np.ndarray:
        return self.gap[:, -1]


def run_cboc(
    problems: list[BlackBoxProblem],
    scheme: ConsensusScheme,
    acq: AcquisitionConfig | None = None,
    n_init: int = 10,
    n_iter: int = 40,
    master_seed: int = 0,
    *,
    run: int = 0,
    topology: str = "centralized",
    workers: int = 1,
    kappa: float | None = None,
) -> RunHistory:
    """Run collaborative BO for ``n_iter`` rounds and return the full history.

    Each round: combine the shared candidates through ``W^(t)``, let every
    client run its experiment at its consensus point, refit, re-optimise,
    and share a new ``(candidate, reward)``. With ``kappa`` set, a client whose
    best utility drops below ``kappa`` stops experimenting.
    """
    acq = acq or AcquisitionConfig()
    K, T = len(problems), n_iter
    if K < 1:
        raise ValueError("need at least one client")
    if T < 1:
        raise ValueError("n_iter must be >= 1")
    dim = problems[0].dim
    bounds = problems[0].bounds
    for p in problems:
        if p.dim != dim or not np.array_equal(p.bounds, bounds):
            raise ValueError("all problems must share dimension and bounds")

    clients = [ClientState.initial(k, problems[k], n_init, acq, master_seed, run) for k in range(K)]
    initial_best = np.array([c.data.responses.max() for c in clients])
    y_star = np.array([p.y_star for p in problems])
    schedule = scheme.start(K)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def each(fn, items):
        return list(pool.map(fn, items)) if pool else [fn(i) for i in items]

    shape = (K, T)
    hist = dict(
        consensus_points=np.zeros((K, T, dim)),
        observations=np.full(shape, np.nan),
        values=np.full(shape, np.nan),
        incumbents=np.zeros(shape),
        regret=np.zeros(shape),
        gap=np.zeros(shape),
        candidates=np.zeros((T, K, dim)),
        rewards=np.zeros((T, K)),
        matrices=np.zeros((T, K, K)),
        leaders=np.full(T, -1, dtype=int),
        hypers=np.full((K, T + 1, 3), np.nan),
    )
    stopped_at = np.full(K, -1, dtype=int)
    message_log: list[list[RoundMessage]] = []

    def hyper_row(c: ClientState) -> list[float]:
        return [c.hyper.variance_scale, c.hyper.lengthscale, c.hyper.noise_sd]

    try:
        messages = each(lambda c: c.propose(), clients)
        for c in clients:
            hist["hypers"][c.id, 0] = hyper_row(c)
        for t in range(T):
            message_log.append(messages)
            x_C, rewards = exchange_round(messages, K, topology)
            W, leader = schedule.next(rewards)
            x_new = consensus_combine(W, x_C)
            if np.any(x_new < bounds[:, 0] - 1e-9) or np.any(x_new > bounds[:, 1] + 1e-9):
                raise AssertionError("consensus point left the design box")
            x_new = np.clip(x_new, bounds[:, 0], bounds[:, 1])
            hist["candidates"][t] = x_C
            hist["rewards"][t] = rewards
            hist["matrices"][t] = W
            hist["leaders"][t] = leader

            for c in clients:
                if kappa is not None and not c.stopped and ei_stopping(c.last_reward, kappa):
                    c.stopped = True
                    stopped_at[c.id] = t
                    log.info("client %d stopped at iteration %d", c.id, t)

            def step(c: ClientState) -> RoundMessage:
                if not c.stopped:
                    c.experiment(x_new[c.id])
                    if t < T - 1:
                        return c.propose()
                return RoundMessage(c.id, c.last_candidate.copy(), c.last_reward)

            messages = each(step, clients)
            for c in clients:
                k = c.id
                hist["consensus_points"][k, t] = x_new[k]
                if c.stopped:
                    hist["incumbents"][k, t] = hist["incumbents"][k, t - 1] if t else initial_best[k]
                else:
                    hist["observations"][k, t] = c.data.responses[-1]
                    hist["values"][k, t] = problems[k].value(x_new[k])
                    hist["regret"][k, t] = y_star[k] - hist["values"][k, t]
                    hist["incumbents"][k, t] = c.data.responses.max()
                hist["gap"][k, t] = gap_metric(initial_best[k], hist["incumbents"][k, t], y_star[k])
                if t < T - 1 and c.hyper is not None:
                    hist["hypers"][k, t + 1] = hyper_row(c)
    finally:
        if pool:
            pool.shutdown()

    return RunHistory(
        initial_best=initial_best,
        y_star=y_star,
        datasets=[c.data for c in clients],
        messages=message_log,
        stopped_at=stopped_at,
        **hist,
    )


def run_individual(
    problems: list[BlackBoxProblem],
    acq: AcquisitionConfig | None = None,
    n_init: int = 10,
    n_iter: int = 40,
    master_seed: int = 0,
    **kw,
) -> RunHistory:
    """Non-collaborative baseline: every client runs plain BO on its own data."""
    return run_cboc(problems, ConsensusScheme("identity", n_iter), acq, n_init, n_iter, master_seed, **kw)
