"""TSP instances, tours, metrics, exact solvers, heuristics and dataset I/O.

Instances live in the unit square with Euclidean distances. Exact solvers
cover the label/report range (brute force to n=10, Held-Karp to n=20);
nearest-neighbor and 2-opt stand in as references beyond that.
"""

from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numba import njit

BRUTE_FORCE_MAX = 10
HELD_KARP_MAX = 20


class DatasetFormatError(ValueError):
    """A dataset file line failed to parse; the message names the line."""


@dataclass(frozen=True)
class TspInstance:
    """n points in the unit square."""

    coords: np.ndarray  # (n, 2) float64

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 2:
            raise ValueError(f"coords must be (n>=2, 2), got {c.shape}")
        if c.min() < 0.0 or c.max() > 1.0:
            raise ValueError("coordinates must lie in [0, 1]")
        object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class Tour:
    """A permutation of node indices read as a closed cycle."""

    order: np.ndarray  # (n,) int64
    length: float
    log_prob: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "order", np.asarray(self.order, dtype=np.int64))


@dataclass
class Dataset:
    instances: list[TspInstance]
    solutions: list[Tour] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instances)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate_instance(n: int, rng) -> TspInstance:
    """n i.i.d. uniform points in the unit square."""
    if n < 2:
        raise ValueError(f"need at least 2 nodes, got {n}")
    return TspInstance(_as_rng(rng).random((n, 2)))


def distance_matrix(inst: TspInstance) -> np.ndarray:
    d = inst.coords[:, None, :] - inst.coords[None, :, :]
    return np.sqrt((d * d).sum(axis=-1))


def _check_permutation(order: np.ndarray, n: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise ValueError(f"order is not a permutation of 0..{n - 1}")
    return order


def tour_length(inst: TspInstance, order) -> float:
    order = _check_permutation(order, inst.n)
    pts = inst.coords[order]
    seg = pts - np.roll(pts, -1, axis=0)
    return float(np.sqrt((seg * seg).sum(axis=1)).sum())


def make_tour(inst: TspInstance, order, log_prob: float | None = None) -> Tour:
    return Tour(np.asarray(order, dtype=np.int64), tour_length(inst, order), log_prob)


def tour_lengths_batch(coords: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """Closed-cycle lengths for (B, n, 2) coordinates and (B, n) orders."""
    pts = np.take_along_axis(coords, orders[:, :, None], axis=1)
    seg = pts - np.roll(pts, -1, axis=1)
    return np.sqrt((seg * seg).sum(axis=2)).sum(axis=1)


def canonicalize(order) -> np.ndarray:
    """Unique representative of a cycle: node 0 first, then the lower-second
    direction. Idempotent; all 2n rotations/reflections map to the same array."""
    order = np.asarray(order, dtype=np.int64)
    n = len(order)
    pos = int(np.nonzero(order == 0)[0][0])
    rot = np.roll(order, -pos)
    if n > 2 and rot[1] > rot[-1]:
        rot = np.concatenate(([0], rot[1:][::-1]))
    return rot


def optimality_gap(pred_len: float, opt_len: float) -> float:
    """Percentage excess of a predicted length over the reference optimum."""
    if opt_len <= 0.0:
        raise ValueError(f"reference length must be positive, got {opt_len}")
    return (pred_len / opt_len - 1.0) * 100.0


# ---------------------------------------------------------------------------
# exact solvers


@lru_cache(maxsize=None)
def _half_cycles(n: int) -> np.ndarray:
    """All (n-1)!/2 distinct cycles as permutations starting at node 0,
    deduplicated across direction by requiring order[1] < order[-1]."""
    if n == 2:
        return np.array([[0, 1]], dtype=np.int64)
    rows = [(0,) + p for p in itertools.permutations(range(1, n)) if p[0] < p[-1]]
    return np.array(rows, dtype=np.int64)


def brute_force_solve(inst: TspInstance) -> Tour:
    """Provably optimal tour by enumerating all distinct cycles."""
    if inst.n > BRUTE_FORCE_MAX:
        raise ValueError(f"brute force refuses n={inst.n} > {BRUTE_FORCE_MAX}")
    cycles = _half_cycles(inst.n)
    dm = distance_matrix(inst)
    lengths = dm[cycles, np.roll(cycles, -1, axis=1)].sum(axis=1)
    best = canonicalize(cycles[int(np.argmin(lengths))])
    return make_tour(inst, best)


@njit(cache=True)
def _held_karp_kernel(dist):
    """Subset DP over (visited-set, last-node) states; node 0 is the anchor.

    Returns (best_length, order) with order[0] == 0.
    """
    n = dist.shape[0]
    m = n - 1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int8)
    for j in range(m):
        dp[1 << j, j] = dist[0, j + 1]
    for mask in range(1, full):
        if mask & (mask - 1) == 0:
            continue
        for j in range(m):
            bit = 1 << j
            if not (mask & bit):
                continue
            prev = mask ^ bit
            best = np.inf
            arg = -1
            for i in range(m):
                if prev & (1 << i):
                    c = dp[prev, i] + dist[i + 1, j + 1]
                    if c < best:
                        best = c
                        arg = i
            dp[mask, j] = best
            parent[mask, j] = arg
    best = np.inf
    arg = -1
    for j in range(m):
        c = dp[full - 1, j] + dist[j + 1, 0]
        if c < best:
            best = c
            arg = j
    order = np.zeros(n, dtype=np.int64)
    mask = full - 1
    j = arg
    for t in range(n - 1, 0, -1):
        order[t] = j + 1
        nj = parent[mask, j]
        mask ^= 1 << j
        j = nj
    return best, order


def held_karp_solve(inst: TspInstance) -> Tour:
    """Optimal tour via dynamic programming; O(n^2 2^n) time, n <= 20."""
    if inst.n > HELD_KARP_MAX:
        raise ValueError(f"Held-Karp refuses n={inst.n} > {HELD_KARP_MAX}")
    _, order = _held_karp_kernel(distance_matrix(inst))
    return make_tour(inst, canonicalize(order))


def held_karp_length(inst: TspInstance) -> float:
    """Optimal tour length only (same DP, canonical re-summation)."""
    return held_karp_solve(inst).length


# ---------------------------------------------------------------------------
# heuristics


def nearest_neighbor(inst: TspInstance, start: int = 0) -> Tour:
    """Greedy nearest-unvisited construction; ties go to the lower index."""
    n = inst.n
    if not 0 <= start < n:
        raise ValueError(f"start node {start} out of range")
    dm = distance_matrix(inst)
    order = np.empty(n, dtype=np.int64)
    order[0] = start
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    cur = start
    for t in range(1, n):
        row = np.where(visited, np.inf, dm[cur])
        cur = int(np.argmin(row))
        order[t] = cur
        visited[cur] = True
    return make_tour(inst, order)


def two_opt(inst: TspInstance, tour: Tour) -> Tour:
    """First-improvement 2-opt until no swap shortens the cycle."""
    dm = distance_matrix(inst)
    order = _check_permutation(tour.order, inst.n).copy()
    n = inst.n
    improved = True
    while improved:
        improved = False
        succ = np.roll(order, -1)
        base = dm[order, succ]
        for i in range(n - 2):
            js = np.arange(i + 1, n - 1 if i == 0 else n)
            delta = (dm[order[i], order[js]] + dm[succ[i], succ[js]]
                     - base[i] - base[js])
            hits = np.nonzero(delta < -1e-12)[0]
            if hits.size:
                j = int(js[hits[0]])
                order[i + 1:j + 1] = order[i + 1:j + 1][::-1].copy()
                improved = True
                break
    return make_tour(inst, order)


def solve_reference(inst: TspInstance) -> tuple[Tour, str]:
    """Reference tour and a tag saying whether it is exact.

    Exact (Held-Karp) up to n=20, 2-opt over nearest-neighbor beyond.
    """
    if inst.n <= HELD_KARP_MAX:
        return held_karp_solve(inst), "exact"
    return two_opt(inst, nearest_neighbor(inst, 0)), "2opt"


SOLVERS = ("none", "heldkarp", "bruteforce", "twoopt")


def solve_with(name: str, inst: TspInstance) -> Tour:
    if name == "heldkarp":
        return held_karp_solve(inst)
    if name == "bruteforce":
        return brute_force_solve(inst)
    if name == "twoopt":
        return two_opt(inst, nearest_neighbor(inst, 0))
    raise ValueError(f"unknown solver {name!r}")


def generate_dataset(n: int, count: int, seed: int, solver: str = "none") -> Dataset:
    """Seeded instances, optionally with reference tours attached."""
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")
    if solver == "bruteforce" and n > BRUTE_FORCE_MAX:
        raise ValueError(f"bruteforce supports n <= {BRUTE_FORCE_MAX}, got {n}")
    if solver == "heldkarp" and n > HELD_KARP_MAX:
        raise ValueError(f"heldkarp supports n <= {HELD_KARP_MAX}, got {n}")
    rng = np.random.default_rng(seed)
    instances = [generate_instance(n, rng) for _ in range(count)]
    solutions = None
    if solver != "none":
        solutions = [solve_with(solver, inst) for inst in instances]
    meta = {"size": n, "count": count, "seed": seed, "solver": solver}
    return Dataset(instances, solutions, meta)


# ---------------------------------------------------------------------------
# dataset files
#
# One instance per line: n "x y" coordinate pairs, then optionally the token
# `output` followed by a 1-indexed tour that repeats its first node at the
# end. Unlabelled datasets carry coordinates only.


def _format_coord(x: float) -> str:
    return f"{x:.12g}"


def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    sizes = {inst.n for inst in ds.instances}
    if len(sizes) > 1:
        raise ValueError(f"dataset mixes instance sizes {sorted(sizes)}")
    lines = []
    for i, inst in enumerate(ds.instances):
        parts = [f"{_format_coord(x)} {_format_coord(y)}" for x, y in inst.coords]
        if ds.solutions is not None:
            tour = ds.solutions[i].order + 1
            parts.append("output")
            parts.append(" ".join(str(v) for v in tour))
            parts.append(str(tour[0]))
        lines.append(" ".join(parts))
    path.write_text("\n".join(lines) + "\n")
    if ds.meta:
        meta_lines = [f"{k} = {ds.meta[k]}" for k in sorted(ds.meta)]
        _sidecar(path).write_text("[dataset]\n" + "\n".join(meta_lines) + "\n")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.ini")


def read_dataset(path) -> Dataset:
    path = Path(path)
    instances: list[TspInstance] = []
    solutions: list[Tour] = []
    labelled: bool | None = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        tokens = raw.split()
        if "output" in tokens:
            cut = tokens.index("output")
            coord_tokens, tour_tokens = tokens[:cut], tokens[cut + 1:]
            has_tour = True
        else:
            coord_tokens, tour_tokens = tokens, []
            has_tour = False
        if labelled is None:
            labelled = has_tour
        elif labelled != has_tour:
            raise DatasetFormatError(f"line {lineno}: mixes labelled and unlabelled records")
        if len(coord_tokens) % 2 != 0 or not coord_tokens:
            raise DatasetFormatError(f"line {lineno}: expected an even number of coordinates")
        try:
            flat = [float(t) for t in coord_tokens]
        except ValueError as e:
            raise DatasetFormatError(f"line {lineno}: bad coordinate ({e})") from None
        coords = np.array(flat).reshape(-1, 2)
        try:
            inst = TspInstance(coords)
        except ValueError as e:
            raise DatasetFormatError(f"line {lineno}: {e}") from None
        if instances and inst.n != instances[0].n:
            raise DatasetFormatError(f"line {lineno}: instance size {inst.n} != {instances[0].n}")
        instances.append(inst)
        if has_tour:
            try:
                tour = [int(t) for t in tour_tokens]
            except ValueError as e:
                raise DatasetFormatError(f"line {lineno}: bad tour index ({e})") from None
            if len(tour) != inst.n + 1:
                raise DatasetFormatError(f"line {lineno}: tour must list {inst.n + 1} nodes, got {len(tour)}")
            if tour[0] != tour[-1]:
                raise DatasetFormatError(f"line {lineno}: tour does not close (starts {tour[0]}, ends {tour[-1]})")
            order = np.array(tour[:-1], dtype=np.int64) - 1
            if order.min() < 0 or order.max() >= inst.n:
                raise DatasetFormatError(f"line {lineno}: tour index out of range 1..{inst.n}")
            try:
                solutions.append(make_tour(inst, order))
            except ValueError as e:
                raise DatasetFormatError(f"line {lineno}: {e}") from None
    if not instances:
        raise DatasetFormatError("dataset file holds no instances")
    meta = {"size": instances[0].n, "count": len(instances), "seed": None, "solver": "file"}
    side = _sidecar(path)
    if side.exists():
        cp = configparser.ConfigParser()
        cp.read(side)
        if cp.has_section("dataset"):
            for k, v in cp.items("dataset"):
                meta[k] = int(v) if v.lstrip("-").isdigit() else v
    return Dataset(instances, solutions if labelled else None, meta)
