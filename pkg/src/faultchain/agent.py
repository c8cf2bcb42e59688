"""Graph recurrent Q-learning search for the riskiest fault chains.

RNG draw order (one ``numpy.random.Generator`` per run, seeded by ``config.seed``):
parameter initialisation, then for every stage the exploration coin followed by the batch
indices of each training update made after that stage. Action choices are argmaxes and
consume no randomness.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import FaultChain, FaultChainEnv, Observation
from .grid import GridCase
from .grnn import GrqnParams, LatentState, backward, forward_arrays


class NoAvailableAction(RuntimeError):
    pass


class InsufficientBuffer(RuntimeError):
    pass


@dataclass
class SearchConfig:
    iterations: int = 1200  # S, excluding the offline episodes
    horizon: int = 3  # P
    kappa: int = 3
    batch: int = 32
    explore: int = 250  # offline buffer episodes
    gamma: float = 0.99
    alpha: float = 0.005
    eps0: float = 0.01
    threshold_mw: float = 0.0  # M
    seed: int = 0
    hidden: int = 12  # H
    out_features: int = 12  # G
    hops: int = 3  # K
    head_width: int = 64  # D
    load_factor: float = 1.0
    budget_seconds: float | None = None
    max_grad_norm: float | None = None
    alpha_tab: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # testing hooks: pin epsilon, or ignore visit counts in both policies
    epsilon_override: float | None = None
    use_counts: bool = True

    def __post_init__(self):
        for name in ("iterations", "horizon", "batch", "hidden", "out_features", "hops", "head_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("kappa", "explore"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 <= self.eps0 <= 1:
            raise ValueError("eps0 must lie in [0, 1]")
        if self.alpha <= 0 or self.alpha_tab <= 0 or self.load_factor <= 0:
            raise ValueError("learning rates and load factor must be positive")
        if self.budget_seconds is not None and self.budget_seconds <= 0:
            raise ValueError("budget_seconds must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# -- bookkeeping structures --------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionTuple:
    obs: Observation
    action: int
    reward: float  # per unit of the initial served load
    next_obs: Observation
    end: bool


class Episode:
    """One stored fault chain with its observations packed for batched unrolls."""

    def __init__(self, transitions: list[TransitionTuple]):
        if not transitions:
            raise ValueError("empty episode")
        self.transitions = transitions
        obs = [t.obs for t in transitions] + [transitions[-1].next_obs]
        self.links = np.stack([o.links for o in obs])
        self.node_state = np.stack([o.node_state for o in obs])
        self.masks = np.stack([o.mask for o in obs])
        self.d_max = obs[0].d_max
        self.actions = np.array([t.action for t in transitions], dtype=int)
        self.rewards = np.array([t.reward for t in transitions], dtype=float)
        self.ends = np.array([t.end for t in transitions], dtype=bool)

    def __len__(self):
        return len(self.transitions)


@dataclass
class Batch:
    adjacency: np.ndarray  # (B, P+1, N, N)
    node_state: np.ndarray  # (B, P+1, N, F)
    masks: np.ndarray  # (B, P+1, U)
    actions: np.ndarray  # (B, P)
    rewards: np.ndarray  # (B, P)
    ends: np.ndarray  # (B, P)
    valid: np.ndarray  # (B, P)

    @classmethod
    def from_episodes(cls, episodes: list[Episode], horizon: int) -> Batch:
        b, p = len(episodes), horizon
        first = episodes[0]
        n, f = first.node_state.shape[1:]
        u = first.masks.shape[1]
        links = np.zeros((b, p + 1, n, n), dtype=bool)
        x = np.zeros((b, p + 1, n, f))
        masks = np.zeros((b, p + 1, u), dtype=bool)
        actions = np.zeros((b, p), dtype=int)
        rewards = np.zeros((b, p))
        ends = np.ones((b, p), dtype=bool)
        valid = np.zeros((b, p), dtype=bool)
        for i, ep in enumerate(episodes):
            t = len(ep)
            links[i, : t + 1] = ep.links
            x[i, : t + 1] = ep.node_state
            masks[i, : t + 1] = ep.masks
            actions[i, :t] = ep.actions
            rewards[i, :t] = ep.rewards
            ends[i, :t] = ep.ends
            valid[i, :t] = True
        return cls(links / first.d_max, x, masks, actions, rewards, ends, valid)


class SequenceBuffer:
    """Ordered store of whole episodes; sampling returns whole episodes."""

    def __init__(self):
        self.episodes: list[Episode] = []

    def __len__(self):
        return len(self.episodes)

    def add(self, episode: Episode | list[TransitionTuple]) -> None:
        if not isinstance(episode, Episode):
            episode = Episode(episode)
        self.episodes.append(episode)

    def sample(self, rng: np.random.Generator, size: int) -> list[Episode]:
        """Uniform with replacement."""
        if not self.episodes:
            raise InsufficientBuffer("buffer is empty")
        idx = rng.integers(0, len(self.episodes), size=size)
        return [self.episodes[i] for i in idx]


class CountTable:
    """Visit counts keyed by (chain prefix, action)."""

    def __init__(self, n_actions: int):
        self.n_actions = n_actions
        self._table: dict[tuple, np.ndarray] = {}

    def vector(self, prefix: tuple) -> np.ndarray:
        v = self._table.get(tuple(prefix))
        return v.copy() if v is not None else np.zeros(self.n_actions)

    def get(self, prefix: tuple, action: int) -> int:
        return int(self.vector(prefix)[action])

    def increment(self, prefix: tuple, action: int) -> None:
        key = tuple(prefix)
        if key not in self._table:
            self._table[key] = np.zeros(self.n_actions)
        self._table[key][action] += 1

    def __len__(self):
        return len(self._table)


class AvailabilityTree:
    """Actions pruned per prefix so that no completed chain is chosen twice.

    When every action available at a prefix has been pruned, the prefix's own last action is
    pruned at its parent, recursively up to the root.
    """

    def __init__(self):
        self.pruned: dict[tuple, set[int]] = defaultdict(set)

    def excluded(self, prefix: tuple) -> set[int]:
        return self.pruned.get(tuple(prefix), set())

    def record(self, actions, available) -> None:
        """Register a finished chain; ``available[i]`` is the action set seen at depth ``i``."""
        actions = tuple(int(a) for a in actions)
        depth = len(actions)
        self.pruned[actions[: depth - 1]].add(actions[-1])
        for d in range(depth - 1, 0, -1):
            prefix = actions[:d]
            if set(available[d]) <= self.pruned[prefix]:
                self.pruned[actions[: d - 1]].add(actions[d - 1])
            else:
                break

    def exhausted(self, root_available) -> bool:
        return set(root_available) <= self.pruned.get((), set())


class Adam:
    """Adam over every tensor of a :class:`GrqnParams`."""

    def __init__(self, params: GrqnParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.step = 0

    def update(self, params: GrqnParams, grads: GrqnParams) -> None:
        self.step += 1
        c1 = 1 - self.beta1**self.step
        c2 = 1 - self.beta2**self.step
        for name in params.names:
            g = getattr(grads, name)
            m = getattr(self.m, name)
            v = getattr(self.v, name)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p = getattr(params, name)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- policies ----------------------------------------------------------------------------------


def _masked_argmax(scores: np.ndarray, mask: np.ndarray) -> int:
    if not mask.any():
        raise NoAvailableAction("no available action")
    return int(np.argmax(np.where(mask, scores, -np.inf)))


def _count_discount(counts: CountTable | None, prefix) -> np.ndarray | float:
    if counts is None:
        return 1.0
    return np.sqrt(counts.vector(prefix) + 1.0)


def select_explore(flows: np.ndarray, counts: CountTable | None, prefix, mask: np.ndarray) -> int:
    """Power-flow weighted choice: largest ``|flow| / sqrt(count + 1)``, lowest id on ties.

    The softmax-free normalisation by the sum over available actions is a positive constant
    and cannot move the argmax, so it is skipped.
    """
    return _masked_argmax(np.abs(flows) / _count_discount(counts, prefix), mask)


def select_exploit(q_values: np.ndarray, counts: CountTable | None, prefix, mask: np.ndarray) -> int:
    return _masked_argmax(q_values / _count_discount(counts, prefix), mask)


def pfw_greedy(flows: np.ndarray, mask: np.ndarray) -> int:
    return _masked_argmax(np.abs(flows), mask)


def update_epsilon(flows0: np.ndarray, counts: CountTable, eps0: float, mask0: np.ndarray | None = None) -> float:
    """Exploration probability from first-stage visit counts, floored at ``eps0``."""
    pf = np.abs(flows0)
    if mask0 is not None:
        pf = pf[mask0]
        c = counts.vector(())[mask0]
    else:
        c = counts.vector(())
    total = pf.sum()
    if total <= 0:
        return 1.0
    return max(float((pf / np.sqrt(c + 1.0)).sum() / total), eps0)


# -- learning ----------------------------------------------------------------------------------


def _masked_max(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    best = np.where(mask, q, -np.inf).max(axis=-1)
    return np.where(mask.any(axis=-1), best, 0.0)


def compute_targets(batch: Batch | Episode | list, target_params: GrqnParams, gamma: float) -> np.ndarray:
    """Look-ahead targets ``r + gamma (1 - end) max_a Q_target(next, a)``.

    The target network is unrolled from a zero latent over the whole observation sequence
    ``O_0 .. O_P`` and read at the next-observation positions ``1 .. P``, so each target
    sees the same history depth as the stage it bootstraps. The max runs over branches in
    service at the next observation.
    """
    if isinstance(batch, Episode):
        return compute_targets(Batch.from_episodes([batch], len(batch)), target_params, gamma)[0]
    if isinstance(batch, list):
        return compute_targets(Episode(batch), target_params, gamma)
    full = forward_arrays(batch.adjacency, batch.node_state, None, target_params, record=False)
    best = _masked_max(full.q[:, 1:], batch.masks[:, 1:])
    return batch.rewards + gamma * (~batch.ends) * best


def td_loss_and_grads(batch: Batch, params: GrqnParams, targets: np.ndarray):
    """Mean squared TD error over valid stages, and its gradient."""
    fwd = forward_arrays(batch.adjacency[:, :-1], batch.node_state[:, :-1], None, params)
    b_idx, t_idx = np.indices(batch.actions.shape)
    q_sa = fwd.q[b_idx, t_idx, batch.actions]
    resid = np.where(batch.valid, q_sa - targets, 0.0)
    n = max(int(batch.valid.sum()), 1)
    loss = float((resid**2).sum() / n)
    dq = np.zeros_like(fwd.q)
    dq[b_idx, t_idx, batch.actions] = 2.0 * resid / n
    return loss, backward(fwd.tape, dq, params)


def train_step(buffer: SequenceBuffer, params: GrqnParams, target_params: GrqnParams, adam: Adam,
               config: SearchConfig, rng: np.random.Generator) -> float:
    """Sample ``B`` episodes, take one Adam step on the mean squared TD error; returns the loss."""
    if len(buffer) < config.batch:
        raise InsufficientBuffer(f"buffer holds {len(buffer)} episodes, batch needs {config.batch}")
    batch = Batch.from_episodes(buffer.sample(rng, config.batch), config.horizon)
    targets = compute_targets(batch, target_params, config.gamma)
    loss, grads = td_loss_and_grads(batch, params, targets)
    if config.max_grad_norm is not None:
        norm = grads.global_norm()
        if norm > config.max_grad_norm:
            for g in grads.tensors().values():
                g *= config.max_grad_norm / norm
    adam.update(params, grads)
    return loss


# -- search ------------------------------------------------------------------------------------


def _available(obs: Observation) -> frozenset[int]:
    return frozenset(np.flatnonzero(obs.mask).tolist())


def offline_fill(env: FaultChainEnv, config: SearchConfig) -> SequenceBuffer:
    """Fill a buffer with ``config.explore`` greedy max-|flow| chains, never repeating a chain."""
    buffer = SequenceBuffer()
    tree = AvailabilityTree()
    scale = env.initial_load
    for _ in range(config.explore):
        obs = env.reset()
        if tree.exhausted(_available(obs)):
            break
        transitions, available = [], []
        while not env.done:
            available.append(_available(obs))
            a = pfw_greedy(env.flows, env.action_mask(tree.excluded(env.prefix)))
            res = env.step(a)
            transitions.append(TransitionTuple(obs, a, res.reward / scale, res.next_observation, res.end))
            obs = res.next_observation
        tree.record(env.chain.actions, available)
        buffer.add(transitions)
    return buffer


class Learner:
    """What a search loop needs from an agent; the tabular baselines implement it too."""

    def q_values(self, obs: Observation, prefix: tuple) -> np.ndarray | None:
        return None

    def learn(self, transition: TransitionTuple, prefix: tuple) -> list[float]:
        return []

    def end_episode(self, transitions: list[TransitionTuple]) -> None:
        pass


class GrqnLearner(Learner):
    def __init__(self, env: FaultChainEnv, config: SearchConfig, rng: np.random.Generator,
                 buffer: SequenceBuffer | None = None, params: GrqnParams | None = None):
        self.config = config
        self.rng = rng
        self.params = params if params is not None else GrqnParams.initialize(
            rng, env.case.n_bus, env.n_actions, features=1, hidden=config.hidden,
            out_features=config.out_features, hops=config.hops, head_width=config.head_width,
        )
        self.target = self.params.copy()
        self.adam = Adam(self.params, config.alpha, config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.buffer = buffer if buffer is not None else SequenceBuffer()
        self.latent = LatentState.zeros(env.case.n_bus, config.hidden)
        self.updates = 0

    def q_values(self, obs, prefix):
        fwd = forward_arrays(obs.adjacency[None], obs.node_state[None], self.latent, self.params, record=False)
        self.latent = fwd.latent  # carried across stages and across episodes
        return fwd.q[0]

    def learn(self, transition, prefix):
        losses = []
        if len(self.buffer) >= self.config.batch:
            for _ in range(self.config.kappa):
                losses.append(train_step(self.buffer, self.params, self.target, self.adam, self.config, self.rng))
                self.updates += 1
        return losses

    def end_episode(self, transitions):
        self.buffer.add(transitions)
        self.target = self.params.copy()


@dataclass
class SearchResult:
    chains: list[FaultChain]  # every discovered chain, in discovery order
    risky: list[FaultChain]  # chains with TLL >= threshold
    log: list[dict]
    episode_seconds: list[float] = field(default_factory=list)
    stopped_by_budget: bool = False
    exhausted: bool = False
    learner: Learner | None = None
    search_seconds: float = 0.0  # online loop only

    @property
    def accumulated_tll(self) -> float:
        return float(sum(c.tll for c in self.chains))


def search_loop(env: FaultChainEnv, learner: Learner, config: SearchConfig,
                rng: np.random.Generator, progress=None) -> SearchResult:
    """Shared episode loop: epsilon-greedy between power-flow exploration and count-discounted
    exploitation, with visit counts, availability backtracking and a wall-clock budget."""
    counts = CountTable(env.n_actions)
    tree = AvailabilityTree()
    scale = env.initial_load
    result = SearchResult([], [], [], learner=learner)
    start = time.perf_counter()
    obs0 = env.reset()
    flows0, mask0 = env.flows.copy(), obs0.mask.copy()
    use_counts = counts if config.use_counts else None

    for s in range(config.iterations):
        if config.budget_seconds is not None and time.perf_counter() - start >= config.budget_seconds:
            result.stopped_by_budget = True
            break
        ep_start = time.perf_counter()
        obs = env.reset()
        if tree.exhausted(_available(obs)):
            result.exhausted = True
            break
        transitions, available, eps_used, explored, losses = [], [], [], [], []
        while not env.done:
            prefix = env.prefix
            available.append(_available(obs))
            mask = env.action_mask(tree.excluded(prefix))
            q = learner.q_values(obs, prefix)
            if config.epsilon_override is not None:
                eps = config.epsilon_override
            else:
                eps = update_epsilon(flows0, counts, config.eps0, mask0)
            go_explore = rng.random() <= eps or q is None
            if go_explore:
                a = select_explore(env.flows, use_counts, prefix, mask)
            else:
                a = select_exploit(q, use_counts, prefix, mask)
            res = env.step(a)
            tr = TransitionTuple(obs, a, res.reward / scale, res.next_observation, res.end)
            transitions.append(tr)
            counts.increment(prefix, a)
            losses.extend(learner.learn(tr, prefix))
            eps_used.append(eps)
            explored.append(bool(go_explore))
            obs = res.next_observation
        tree.record(env.chain.actions, available)
        learner.end_episode(transitions)
        chain = env.chain
        result.chains.append(chain)
        if chain.tll >= config.threshold_mw:
            result.risky.append(chain)
        rec = {"episode": s + 1, **chain.to_record(), "epsilon": eps_used, "explored": explored,
               "train_loss": losses}
        result.log.append(rec)
        result.episode_seconds.append(time.perf_counter() - ep_start)
        if progress is not None:
            progress(s + 1, chain)
    result.search_seconds = time.perf_counter() - start
    return result


def run_search(case: GridCase | FaultChainEnv, config: SearchConfig, progress=None,
               buffer: SequenceBuffer | None = None) -> SearchResult:
    """Graph recurrent Q-learning: offline buffer fill, then ``config.iterations`` online chains.

    ``buffer`` may be a precomputed offline buffer for the same case and load factor.
    """
    env = case if isinstance(case, FaultChainEnv) else FaultChainEnv(case, config.load_factor, config.horizon)
    rng = np.random.default_rng(config.seed)
    learner = GrqnLearner(env, config, rng)
    learner.buffer = buffer if buffer is not None else offline_fill(env, config)
    return search_loop(env, learner, config, rng, progress)


def epsilon_trace(flows0: np.ndarray, counts_seq, eps0: float) -> list[float]:
    """Epsilon after each first-stage count vector in ``counts_seq`` (diagnostic helper)."""
    out = []
    for c in counts_seq:
        table = CountTable(len(flows0))
        for a, n in enumerate(c):
            for _ in range(int(n)):
                table.increment((), a)
        out.append(update_epsilon(flows0, table, eps0))
    return out


__all__ = [
    "Adam", "AvailabilityTree", "Batch", "CountTable", "Episode", "GrqnLearner", "InsufficientBuffer",
    "Learner", "NoAvailableAction", "SearchConfig", "SearchResult", "SequenceBuffer", "TransitionTuple",
    "compute_targets", "offline_fill", "pfw_greedy", "run_search", "search_loop", "select_exploit",
    "select_explore", "train_step", "update_epsilon",
]
