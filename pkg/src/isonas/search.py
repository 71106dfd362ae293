"""Indicator scores, ranked subnet selection and resource accounting.

Scores come from the gamma magnitudes of trained indicators: per candidate
S[l][m] = Mean(|gamma_v|), multiplied on normal layers by the layer weight
Mean(|gamma_u|) so per-layer score scales become comparable before summing
across layers. Subnet search ranks score sums under FLOP/parameter
constraints, exhaustively on small spaces and with a small evolutionary
loop otherwise; an enumeration oracle keeps the two honest against each
other.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .supernet import (LAYER_ID, PathSample, SearchSpace, Supernet,
                       layer_channels, layer_spatial_sizes, _unit_kernels)


class InfeasibleError(RuntimeError):
    """No subnet satisfies the resource constraint."""


@dataclass(frozen=True)
class Constraint:
    max_flops: int = None
    max_params: int = None

    def satisfied(self, flops, params):
        if self.max_flops is not None and flops > self.max_flops:
            return False
        if self.max_params is not None and params > self.max_params:
            return False
        return True

    def is_bounded(self):
        return self.max_flops is not None or self.max_params is not None


@dataclass(frozen=True)
class ScoreTable:
    """S[l][m] block scores (layer factor already applied on normal layers)
    plus the raw layer weights for reporting."""

    scores: tuple  # tuple of tuples, scores[l][m]
    layer_weight: tuple  # per layer; None entries on reduction layers

    def subnet_score(self, choices):
        return float(sum(self.scores[l][m] for l, m in enumerate(choices)))

    def to_json_dict(self):
        return {"scores": [list(row) for row in self.scores],
                "layer_weight": [None if w is None else float(w)
                                 for w in self.layer_weight]}

    def canonical_bytes(self):
        return json.dumps(self.to_json_dict(), sort_keys=True).encode()


@dataclass(frozen=True)
class RankedSubnet:
    choices: tuple
    score: float
    flops: int
    params: int


def compute_scores(net_or_store, space: SearchSpace = None):
    """Algorithm-2 search phase scoring from trained gamma values."""
    if isinstance(net_or_store, Supernet):
        store = net_or_store.indicators
        space = net_or_store.space
    else:
        store = net_or_store
        if space is None:
            raise ValueError("space required when passing a bare IndicatorStore")
    scores = []
    layer_weights = []
    for li, sl in enumerate(space.layers):
        base = [float(np.mean(np.abs(p.gamma.data))) for p in store.block_indicators[li]]
        if sl.is_reduction:
            scores.append(tuple(base))
            layer_weights.append(None)
        else:
            u = float(np.mean(np.abs(store.layer_indicators[li].gamma.data)))
            scores.append(tuple(b * u for b in base))
            layer_weights.append(u)
    return ScoreTable(scores=tuple(scores), layer_weight=tuple(layer_weights))


def select_top_per_layer(table: ScoreTable):
    """Per-layer argmax; ties resolve to the lowest candidate index."""
    return PathSample(choices=tuple(int(np.argmax(row)) for row in table.scores))


# ---------------------------------------------------------------------------
# resource model


def _conv_cost(d_out, d_in, k, n_out):
    macs = d_out * d_in * k * k * n_out * n_out
    params = d_out * d_in * k * k
    return macs, params


def flops_and_params(choices, space: SearchSpace, include_stem_head=True):
    """Analytic multiply-accumulate and parameter counts for one subnet.

    Convolution MACs are d_out * d_in * k^2 per output position; parameters
    count conv/dense weights only (bias-free policy, BN affine pairs are
    negligible bookkeeping and excluded).
    """
    sizes = layer_spatial_sizes(space)
    chans = layer_channels(space)
    flops = 0
    params = 0
    if include_stem_head:
        n0 = space.image_size // 2
        f, p = _conv_cost(space.stem_channels, 4 * space.image_channels, 2, n0)
        flops += f
        params += p
        params += space.num_classes * chans[-1][1]
        flops += space.num_classes * chans[-1][1]
    for li, choice in enumerate(choices):
        if choice == LAYER_ID:
            continue
        sl = space.layers[li]
        tpl = sl.candidates[choice]
        d_in, d_out = chans[li]
        n = sizes[li]
        reduction = sl.is_reduction
        split = (not reduction) and tpl.kind in ("shuffle", "shuffle-xception")
        width = d_in // 2 if split else d_in
        for k, reduce_first in _unit_kernels(tpl, reduction):
            c_in = width
            if reduce_first:
                n //= 2
                c_in = 4 * width
                width = d_out
            f, p = _conv_cost(width, c_in, k, n)
            flops += f
            params += p
    return int(flops), int(params)


# ---------------------------------------------------------------------------
# search


def _iter_space(space):
    return itertools.product(*[range(m) for m in space.branching()])


def search_exhaustive(table: ScoreTable, space: SearchSpace, constraint: Constraint,
                      k=1, max_size=10 ** 6):
    size = space.size()
    if size > max_size:
        raise ValueError(f"space size {size} too large for exhaustive search")
    ranked = []
    for choices in _iter_space(space):
        flops, params = flops_and_params(choices, space)
        if not constraint.satisfied(flops, params):
            continue
        ranked.append(RankedSubnet(choices=tuple(choices),
                                   score=table.subnet_score(choices),
                                   flops=flops, params=params))
    if not ranked:
        raise InfeasibleError("no subnet satisfies the constraint")
    ranked.sort(key=lambda r: (-r.score, r.choices))
    return ranked[:k]


def _greedy_seed(space, constraint, key):
    """Cheapest-per-layer path under one resource axis; feasibility anchor."""
    choices = []
    for li, sl in enumerate(space.layers):
        costs = []
        for mi in range(len(sl.candidates)):
            probe = [0] * len(space.layers)
            probe[li] = mi
            costs.append(flops_and_params(tuple(probe), space)[key])
        choices.append(int(np.argmin(costs)))
    return tuple(choices)


def search_evolutionary(table: ScoreTable, space: SearchSpace, constraint: Constraint,
                        k=1, rng=None, population=64, generations=50,
                        mutation_rate=0.1, elitism=4, tournament=4,
                        immigrants=8):
    """Tournament-selection EA over candidate-index genomes.

    Infeasible genomes score -inf. The initial population is seeded with the
    per-layer cheapest paths on both resource axes so a feasible region, if
    one exists near the boundary, is reachable; per-generation random
    immigrants keep the search from stalling on small spaces.
    """
    rng = np.random.default_rng() if rng is None else rng
    ms = space.branching()
    L = len(ms)

    evaluated = {}

    def fitness(choices):
        if choices not in evaluated:
            flops, params = flops_and_params(choices, space)
            ok = constraint.satisfied(flops, params)
            evaluated[choices] = (table.subnet_score(choices) if ok else -np.inf,
                                  flops, params)
        return evaluated[choices]

    def random_genome():
        return tuple(int(rng.integers(m)) for m in ms)

    pop = [random_genome() for _ in range(population - 2)]
    pop.append(_greedy_seed(space, constraint, 0))
    pop.append(_greedy_seed(space, constraint, 1))
    for _ in range(generations):
        scored = sorted(pop, key=lambda g: -fitness(g)[0])
        elite = scored[:elitism]
        nxt = list(elite)
        while len(nxt) < population - immigrants:
            contenders = [pop[int(rng.integers(len(pop)))] for _ in range(tournament)]
            pa = max(contenders, key=lambda g: fitness(g)[0])
            contenders = [pop[int(rng.integers(len(pop)))] for _ in range(tournament)]
            pb = max(contenders, key=lambda g: fitness(g)[0])
            cut = int(rng.integers(1, L)) if L > 1 else 0
            child = list(pa[:cut] + pb[cut:])
            for li in range(L):
                if rng.random() < mutation_rate:
                    child[li] = int(rng.integers(ms[li]))
            nxt.append(tuple(child))
        while len(nxt) < population:
            nxt.append(random_genome())
        pop = nxt
    feasible = {g: v for g, v in evaluated.items() if np.isfinite(v[0])}
    if not feasible:
        raise InfeasibleError("evolutionary search found no feasible subnet")
    ranked = sorted((RankedSubnet(choices=g, score=v[0], flops=v[1], params=v[2])
                     for g, v in feasible.items()),
                    key=lambda r: (-r.score, r.choices))
    return ranked[:k]


def search_topk(table: ScoreTable, space: SearchSpace, constraint: Constraint,
                k=1, strategy="exhaustive", rng=None):
    """Rank the K best feasible subnets by indicator score sum."""
    if strategy == "exhaustive":
        return search_exhaustive(table, space, constraint, k=k)
    if strategy == "evolutionary":
        return search_evolutionary(table, space, constraint, k=k, rng=rng)
    raise ValueError(f"unknown strategy {strategy!r}")


def ranked_to_jsonl(ranked, path):
    with open(path, "w") as fh:
        for rank, r in enumerate(ranked):
            fh.write(json.dumps({"rank": rank, "choices": list(r.choices),
                                 "score": r.score, "flops": r.flops,
                                 "params": r.params}) + "\n")


def ranked_from_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            out.append(RankedSubnet(choices=tuple(d["choices"]), score=d["score"],
                                    flops=d["flops"], params=d["params"]))
    return out
