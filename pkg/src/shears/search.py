"""Sub-adapter configuration discovery over per-module rank choices.

Three strategies share one evaluator interface, a callable
config -> (metric to maximize, param count to minimize):
  - heuristic: the center-of-space pick, index floor(n/2) of each module's
    descending choice list;
  - hill climbing: steepest ascent on the metric over one-module/one-step
    neighborhoods, cache-aware, budget-bounded;
  - evolutionary: NSGA-II with binary tournament, uniform crossover and
    adjacent-rank mutation; with reference points the survival score switches
    from crowding distance to negated normalized distance to the nearest
    reference point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adapters import SubAdapterConfig, SuperAdapter
from .linalg import Rng

Objectives = tuple[float, int]
Evaluator = Callable[[SubAdapterConfig], Objectives]


@dataclass(frozen=True)
class SearchSpace:
    choices: dict[str, tuple[int, ...]]

    @classmethod
    def from_adapter(cls, adapter: SuperAdapter) -> "SearchSpace":
        return cls({name: tuple(adapter.rank_choices) for name in adapter.pairs})

    @property
    def modules(self) -> list[str]:
        return list(self.choices.keys())

    @property
    def size(self) -> int:
        total = 1
        for ranks in self.choices.values():
            total *= len(ranks)
        return total

    def contains(self, config: SubAdapterConfig) -> bool:
        return set(config) == set(self.choices) and all(
            config[m] in self.choices[m] for m in self.choices
        )


@dataclass
class Candidate:
    config: SubAdapterConfig
    metric: float | None = None
    params: int | None = None

    @property
    def evaluated(self) -> bool:
        return self.metric is not None and self.params is not None


def fingerprint(config: SubAdapterConfig) -> tuple:
    return tuple(sorted(config.items()))


class EvalCache:
    """config fingerprint -> objectives; a deterministic evaluator makes hits exact."""

    def __init__(self):
        self._entries: dict[tuple, Objectives] = {}

    def get(self, config: SubAdapterConfig) -> Objectives | None:
        return self._entries.get(fingerprint(config))

    def put(self, config: SubAdapterConfig, objectives: Objectives) -> None:
        self._entries[fingerprint(config)] = objectives

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def best_by_metric(self) -> tuple[SubAdapterConfig, Objectives]:
        best_fp, best_obj = max(
            self._entries.items(), key=lambda kv: (kv[1][0], -kv[1][1])
        )
        return dict(best_fp), best_obj


class CachedEvaluator:
    """Wraps an evaluator with an EvalCache; `calls` counts true invocations."""

    def __init__(self, fn: Evaluator, cache: EvalCache | None = None):
        self.fn = fn
        self.cache = cache if cache is not None else EvalCache()
        self.calls = 0

    def __call__(self, config: SubAdapterConfig) -> Objectives:
        hit = self.cache.get(config)
        if hit is not None:
            return hit
        self.calls += 1
        objectives = self.fn(config)
        self.cache.put(config, objectives)
        return objectives


def heuristic_config(space: SearchSpace) -> SubAdapterConfig:
    """Index floor(n/2) of each module's descending choice list (0 = maximal)."""
    return {m: ranks[len(ranks) // 2] for m, ranks in space.choices.items()}


def neighbors(config: SubAdapterConfig, space: SearchSpace) -> list[SubAdapterConfig]:
    """Configs differing in exactly one module by one list position.

    Ordered by module, the move to the smaller rank before the larger one.
    """
    out = []
    for module, ranks in space.choices.items():
        idx = ranks.index(config[module])
        if idx + 1 < len(ranks):
            out.append({**config, module: ranks[idx + 1]})
        if idx - 1 >= 0:
            out.append({**config, module: ranks[idx - 1]})
    return out


class _BudgetExhausted(Exception):
    pass


def hill_climb(
    evaluator: Evaluator,
    start: SubAdapterConfig,
    space: SearchSpace,
    budget: int,
    cache: EvalCache | None = None,
) -> tuple[SubAdapterConfig, list[tuple[SubAdapterConfig, float]]]:
    """Steepest-ascent on the metric from `start`; at most `budget` evaluations.

    Moves only on strict improvement, so the returned metric is never below
    the start's. The trace lists the accepted (config, metric) steps.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if not space.contains(start):
        raise ValueError("start config is not a member of the search space")
    cache = cache if cache is not None else EvalCache()
    used = 0

    def evaluate(config: SubAdapterConfig) -> Objectives:
        nonlocal used
        hit = cache.get(config)
        if hit is not None:
            return hit
        if used >= budget:
            raise _BudgetExhausted
        used += 1
        objectives = evaluator(config)
        cache.put(config, objectives)
        return objectives

    current = dict(start)
    current_metric = evaluate(current)[0]
    trace = [(dict(current), current_metric)]
    while True:
        best_nb, best_metric = None, current_metric
        try:
            for nb in neighbors(current, space):
                metric = evaluate(nb)[0]
                if metric > best_metric:
                    best_nb, best_metric = nb, metric
        except _BudgetExhausted:
            break
        if best_nb is None:
            break
        current, current_metric = best_nb, best_metric
        trace.append((dict(current), current_metric))
    return current, trace


def _dominates(a: Candidate, b: Candidate) -> bool:
    return (
        a.metric >= b.metric
        and a.params <= b.params
        and (a.metric > b.metric or a.params < b.params)
    )


def nondominated_sort(candidates: list[Candidate]) -> list[list[Candidate]]:
    """Pareto fronts under (maximize metric, minimize params); front 0 first."""
    for cand in candidates:
        if not cand.evaluated:
            raise ValueError("nondominated_sort requires evaluated candidates")
    n = len(candidates)
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    dominators = [0] * n
    fronts: list[list[int]] = [[]]
    for p in range(n):
        for q in range(n):
            if p == q:
                continue
            if _dominates(candidates[p], candidates[q]):
                dominated_by[p].append(q)
            elif _dominates(candidates[q], candidates[p]):
                dominators[p] += 1
        if dominators[p] == 0:
            fronts[0].append(p)
    i = 0
    while fronts[i]:
        nxt = []
        for p in fronts[i]:
            for q in dominated_by[p]:
                dominators[q] -= 1
                if dominators[q] == 0:
                    nxt.append(q)
        i += 1
        fronts.append(nxt)
    fronts.pop()
    return [[candidates[i] for i in front] for front in fronts]


def crowding_distance(front: list[Candidate]) -> list[float]:
    """Standard two-objective crowding distance; boundary points get inf."""
    n = len(front)
    dist = [0.0] * n
    if n <= 2:
        return [float("inf")] * n
    for objective in (lambda c: c.metric, lambda c: c.params):
        order = sorted(range(n), key=lambda i: objective(front[i]))
        lo, hi = objective(front[order[0]]), objective(front[order[-1]])
        dist[order[0]] = dist[order[-1]] = float("inf")
        span = hi - lo if hi > lo else 1.0
        for k in range(1, n - 1):
            gap = objective(front[order[k + 1]]) - objective(front[order[k - 1]])
            dist[order[k]] += gap / span
    return dist


def reference_point_scores(
    front: list[Candidate], reference_points: list[tuple[float, float]]
) -> list[float]:
    """Negated normalized distance to the nearest reference point (higher = better)."""
    metrics = np.array([c.metric for c in front], dtype=np.float64)
    params = np.array([c.params for c in front], dtype=np.float64)
    m_lo, m_hi = metrics.min(), metrics.max()
    p_lo, p_hi = params.min(), params.max()
    m_span = m_hi - m_lo if m_hi > m_lo else 1.0
    p_span = p_hi - p_lo if p_hi > p_lo else 1.0
    scores = np.full(len(front), -np.inf)
    for ref_m, ref_p in reference_points:
        dm = (metrics - ref_m) / m_span
        dp = (params - ref_p) / p_span
        scores = np.maximum(scores, -np.sqrt(dm**2 + dp**2))
    return scores.tolist()


def _diversity(front: list[Candidate], reference_points) -> list[float]:
    if reference_points:
        return reference_point_scores(front, reference_points)
    return crowding_distance(front)


def _rank_population(
    population: list[Candidate], reference_points
) -> tuple[dict[int, int], dict[int, float]]:
    ranks: dict[int, int] = {}
    diversity: dict[int, float] = {}
    for rank, front in enumerate(nondominated_sort(population)):
        scores = _diversity(front, reference_points)
        for cand, score in zip(front, scores):
            ranks[id(cand)] = rank
            diversity[id(cand)] = score
    return ranks, diversity


def _random_config(space: SearchSpace, rng: Rng) -> SubAdapterConfig:
    return {m: ranks[int(rng.integers(0, len(ranks)))] for m, ranks in space.choices.items()}


def _mutate(config: SubAdapterConfig, space: SearchSpace, rng: Rng) -> SubAdapterConfig:
    out = dict(config)
    prob = 1.0 / len(space.choices)
    for module, ranks in space.choices.items():
        if rng.uniform() >= prob:
            continue
        idx = ranks.index(out[module])
        moves = [j for j in (idx - 1, idx + 1) if 0 <= j < len(ranks)]
        if moves:
            out[module] = ranks[moves[int(rng.integers(0, len(moves)))]]
    return out


def _crossover(
    p1: SubAdapterConfig, p2: SubAdapterConfig, space: SearchSpace, rng: Rng
) -> tuple[SubAdapterConfig, SubAdapterConfig]:
    c1, c2 = {}, {}
    for module in space.choices:
        if rng.uniform() < 0.5:
            c1[module], c2[module] = p1[module], p2[module]
        else:
            c1[module], c2[module] = p2[module], p1[module]
    return c1, c2


def evolutionary_search(
    evaluator: Evaluator,
    space: SearchSpace,
    pop_size: int,
    generations: int,
    rng: Rng,
    reference_points: list[tuple[float, float]] | None = None,
) -> tuple[list[Candidate], SubAdapterConfig]:
    """NSGA-II loop; returns (final Pareto front, best-by-metric config).

    Generation 0 always contains the heuristic and maximal configs, and every
    evaluation is cached, so the best-by-metric result is never worse than
    either seed. Deterministic per rng seed.
    """
    if pop_size < 4 or pop_size % 2 != 0:
        raise ValueError(f"pop_size must be even and >= 4, got {pop_size}")
    if generations < 1:
        raise ValueError(f"generations must be >= 1, got {generations}")
    cached = evaluator if isinstance(evaluator, CachedEvaluator) else CachedEvaluator(evaluator)

    def make_candidate(config: SubAdapterConfig) -> Candidate:
        metric, params = cached(config)
        return Candidate(config=dict(config), metric=metric, params=params)

    seeds = [heuristic_config(space), {m: ranks[0] for m, ranks in space.choices.items()}]
    population = [make_candidate(cfg) for cfg in seeds]
    while len(population) < pop_size:
        population.append(make_candidate(_random_config(space, rng)))
    population = population[:pop_size]

    for _ in range(generations):
        population.sort(key=lambda c: fingerprint(c.config))
        ranks, diversity = _rank_population(population, reference_points)

        def tournament() -> Candidate:
            i = int(rng.integers(0, len(population)))
            j = int(rng.integers(0, len(population)))
            a, b = population[i], population[j]
            key_a = (ranks[id(a)], -diversity[id(a)])
            key_b = (ranks[id(b)], -diversity[id(b)])
            return a if key_a <= key_b else b

        offspring: list[Candidate] = []
        while len(offspring) < pop_size:
            p1, p2 = tournament(), tournament()
            c1, c2 = _crossover(p1.config, p2.config, space, rng)
            offspring.append(make_candidate(_mutate(c1, space, rng)))
            if len(offspring) < pop_size:
                offspring.append(make_candidate(_mutate(c2, space, rng)))

        combined = population + offspring
        combined.sort(key=lambda c: fingerprint(c.config))
        next_population: list[Candidate] = []
        for front in nondominated_sort(combined):
            if len(next_population) + len(front) <= pop_size:
                next_population.extend(front)
                continue
            scores = _diversity(front, reference_points)
            order = sorted(range(len(front)), key=lambda i: -scores[i])
            need = pop_size - len(next_population)
            next_population.extend(front[i] for i in order[:need])
            break
        population = next_population

    final_front = nondominated_sort(population)[0]
    unique: dict[tuple, Candidate] = {}
    for cand in final_front:
        unique.setdefault(fingerprint(cand.config), cand)
    best_config, _ = cached.cache.best_by_metric()
    return list(unique.values()), best_config
