"""Autoregressive attention decoder plus greedy, sampling and beam search.

The decoder scores unvisited nodes from a context query (graph embedding
plus first/last visited node embeddings, learned placeholders at step 0),
refines it with one multi-head glimpse over the node embeddings, and clips
the final single-head compatibilities to [-C, C] with C*tanh before the
masked softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, uniform_init
from .encoders import Embeddings, _split_heads
from .tsp import TspInstance, Tour, make_tour

DEFAULT_CLIP = 10.0


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"      # greedy | sample | beam
    k: int = 1280             # rollouts for sampling
    width: int = 1280         # beam width
    seed: int = 0
    clip: float = DEFAULT_CLIP

    def __post_init__(self):
        if self.mode not in ("greedy", "sample", "beam"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.k < 1 or self.width < 1 or self.clip <= 0:
            raise ValueError("need k >= 1, width >= 1, clip > 0")

    def tag(self) -> str:
        if self.mode == "sample":
            return f"sample:{self.k}"
        if self.mode == "beam":
            return f"beam:{self.width}"
        return "greedy"


@dataclass
class DecoderState:
    """Visited-so-far bookkeeping for one instance."""

    partial: list[int] = field(default_factory=list)
    mask: np.ndarray | None = None  # visited flags

    @property
    def step(self) -> int:
        return len(self.partial)

    @property
    def first(self) -> int | None:
        return self.partial[0] if self.partial else None

    @property
    def last(self) -> int | None:
        return self.partial[-1] if self.partial else None

    def visit(self, node: int) -> None:
        self.partial.append(int(node))
        self.mask[node] = True


def init_decoder(embed_dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    d = embed_dim
    params = {
        "dec.placeholder": uniform_init((2 * d,), 1, rng),
        "dec.graph.w": uniform_init((d, d), d, rng),
        "dec.ctx.w": uniform_init((2 * d, d), 2 * d, rng),
        "dec.glimpse_k.w": uniform_init((d, d), d, rng),
        "dec.glimpse_v.w": uniform_init((d, d), d, rng),
        "dec.glimpse_out.w": uniform_init((d, d), d, rng),
        "dec.logit_k.w": uniform_init((d, d), d, rng),
    }
    return params


@dataclass
class DecoderFixed:
    """Per-batch projections that stay constant across decode steps."""

    node: Tensor       # (B, n, d)
    graph_ctx: Tensor  # (B, d)
    glimpse_k: Tensor  # (B, H, n, dh)
    glimpse_v: Tensor  # (B, H, n, dh)
    logit_k: Tensor    # (B, n, d)
    heads: int
    clip: float


def precompute_fixed(params, emb: Embeddings, heads: int, clip: float = DEFAULT_CLIP) -> DecoderFixed:
    node = emb.node
    return DecoderFixed(
        node=node,
        graph_ctx=ad.matmul(emb.graph, params["dec.graph.w"]),
        glimpse_k=_split_heads(ad.matmul(node, params["dec.glimpse_k.w"]), heads),
        glimpse_v=_split_heads(ad.matmul(node, params["dec.glimpse_v.w"]), heads),
        logit_k=ad.matmul(node, params["dec.logit_k.w"]),
        heads=heads,
        clip=clip,
    )


def step_probs(params, fx: DecoderFixed, visited: np.ndarray,
               first_idx: np.ndarray | None, last_idx: np.ndarray | None) -> tuple[Tensor, np.ndarray]:
    """Distribution over next nodes for a batch of partial tours.

    ``visited`` is (B, n) bool; ``first_idx``/``last_idx`` are (B,) int or
    None at step 0. The fixed projections may carry batch dimension 1 and
    broadcast against a wider state batch (used by sampling and beam).
    Returns (probs Tensor (B, n), valid (B, n)); visited nodes get exactly 0.
    """
    bsz, n = visited.shape
    d = fx.node.shape[-1]
    heads = fx.heads
    dh = d // heads
    valid = ~visited
    if not valid.any(axis=1).all():
        raise ValueError("decode step with all nodes visited")
    if first_idx is None:
        ctx = ad.broadcast_to(ad.reshape(params["dec.placeholder"], (1, 2 * d)), (bsz, 2 * d))
    else:
        ctx = ad.concat([ad.gather_nodes(fx.node, first_idx), ad.gather_nodes(fx.node, last_idx)], axis=-1)
    q = ad.add(fx.graph_ctx, ad.matmul(ctx, params["dec.ctx.w"]))
    qh = ad.reshape(q, (bsz, heads, 1, dh))
    scores = ad.mul(ad.matmul(qh, ad.transpose(fx.glimpse_k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, mask=valid[:, None, None, :])
    glimpse = ad.reshape(ad.matmul(attn, fx.glimpse_v), (bsz, d))
    qf = ad.matmul(glimpse, params["dec.glimpse_out.w"])
    compat = ad.reshape(ad.matmul(ad.reshape(qf, (bsz, 1, d)), ad.transpose(fx.logit_k, (0, 2, 1))), (bsz, n))
    clipped = ad.mul(ad.tanh(ad.mul(compat, 1.0 / np.sqrt(d))), fx.clip)
    probs = ad.softmax(clipped, mask=valid)
    return probs, valid


def log_probs_np(probs: Tensor, valid: np.ndarray) -> np.ndarray:
    """Normalized log-probabilities with visited nodes at -inf."""
    out = np.full(probs.shape, -np.inf)
    np.log(probs.data, out=out, where=valid)
    return out


def decode_step(model, emb: Embeddings, state: DecoderState, clip: float = DEFAULT_CLIP) -> np.ndarray:
    """Single-instance step distribution as log-probabilities over nodes."""
    node = emb.node
    if node.ndim == 2:
        emb = Embeddings(node=ad.reshape(node, (1,) + node.shape), graph=ad.reshape(emb.graph, (1, -1)))
    fx = precompute_fixed(model.params, emb, model.config.heads, clip)
    n = emb.node.shape[1]
    if state.mask is None:
        state.mask = np.zeros(n, dtype=bool)
    visited = state.mask[None, :]
    first = None if state.first is None else np.array([state.first])
    last = None if state.last is None else np.array([state.last])
    probs, valid = step_probs(model.params, fx, visited, first, last)
    return log_probs_np(probs, valid)[0]


# ---------------------------------------------------------------------------
# rollouts over a coordinate batch


def greedy_rollout(model, coords: np.ndarray, clip: float = DEFAULT_CLIP) -> tuple[np.ndarray, np.ndarray]:
    """Argmax decode for a (B, n, 2) batch; ties go to the lower node index.

    Returns (orders (B, n), summed log-probs (B,)).
    """
    bsz, n, _ = coords.shape
    fx = precompute_fixed(model.params, model.encode(coords), model.config.heads, clip)
    visited = np.zeros((bsz, n), dtype=bool)
    orders = np.zeros((bsz, n), dtype=np.int64)
    logp = np.zeros(bsz)
    rows = np.arange(bsz)
    first = last = None
    for t in range(n):
        probs, valid = step_probs(model.params, fx, visited, first, last)
        lp = log_probs_np(probs, valid)
        choice = np.argmax(lp, axis=1)
        logp += lp[rows, choice]
        orders[:, t] = choice
        visited[rows, choice] = True
        first = orders[:, 0]
        last = choice
    return orders, logp


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Categorical draw per row from uniforms in [0, 1)."""
    cum = np.cumsum(probs, axis=1)
    idx = (u[:, None] >= cum).sum(axis=1)
    idx = np.minimum(idx, probs.shape[1] - 1)
    # guard the measure-zero rounding edge: never land on a zero-probability slot
    bad = probs[np.arange(len(idx)), idx] <= 0.0
    if bad.any():
        idx[bad] = np.argmax(probs[bad], axis=1)
    return idx


def _sample_steps(params, fx: DecoderFixed, n: int, uniforms: np.ndarray):
    """Sampled rollouts driven by pre-drawn uniforms (B, n); the fixed
    projections may be batch-1 and broadcast. Returns (orders, logp Tensor)."""
    bsz = uniforms.shape[0]
    visited = np.zeros((bsz, n), dtype=bool)
    orders = np.zeros((bsz, n), dtype=np.int64)
    rows = np.arange(bsz)
    logp_terms = []
    first = last = None
    for t in range(n):
        probs, _ = step_probs(params, fx, visited, first, last)
        choice = _inverse_cdf(probs.data, uniforms[:, t])
        logp_terms.append(ad.log(ad.take_last(probs, choice)))
        orders[:, t] = choice
        visited[rows, choice] = True
        first = orders[:, 0]
        last = choice
    total = logp_terms[0]
    for term in logp_terms[1:]:
        total = ad.add(total, term)
    return orders, total


def sample_rollout(model, coords: np.ndarray, uniforms: np.ndarray,
                   training: bool = False, clip: float = DEFAULT_CLIP):
    """One sampled tour per row of a (B, n, 2) batch.

    Returns (orders (B, n), summed log-prob Tensor (B,)). With an active
    tape and training=True this is the REINFORCE forward pass.
    """
    n = coords.shape[1]
    fx = precompute_fixed(model.params, model.encode(coords, training=training), model.config.heads, clip)
    return _sample_steps(model.params, fx, n, uniforms)


# ---------------------------------------------------------------------------
# search procedures


@dataclass
class SampleResult:
    best: Tour
    lengths: np.ndarray  # all k sampled lengths
    orders: np.ndarray   # (k, n)


def sample_decode(model, inst: TspInstance, k: int, rng, clip: float = DEFAULT_CLIP) -> SampleResult:
    """Best of k independent rollouts at temperature 1.

    Rollout j draws from the j-th spawned child stream, so the first k
    rollouts are identical for any larger k with the same seed.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = inst.n
    uniforms = np.stack([child.random(n) for child in rng.spawn(k)])
    fx = precompute_fixed(model.params, model.encode(inst.coords[None]), model.config.heads, clip)
    orders, logp = _sample_steps(model.params, fx, n, uniforms)
    pts = inst.coords[orders]
    seg = pts - np.roll(pts, -1, axis=1)
    lengths = np.sqrt((seg * seg).sum(axis=2)).sum(axis=1)
    best = int(np.argmin(lengths))
    tour = make_tour(inst, orders[best], log_prob=float(logp.data[best]))
    return SampleResult(best=tour, lengths=lengths, orders=orders)


@dataclass
class BeamResult:
    shortest: Tour       # headline: shortest completed tour
    most_probable: Tour  # highest cumulative log-probability tour
    lengths: np.ndarray


def beam_search(model, inst: TspInstance, width: int, clip: float = DEFAULT_CLIP) -> BeamResult:
    """Breadth-wise search keeping the ``width`` best partials by cumulative
    log-probability; ties break toward the lexicographically smaller tour."""
    if width < 1:
        raise ValueError("width must be >= 1")
    n = inst.n
    fx = precompute_fixed(model.params, model.encode(inst.coords[None]), model.config.heads, clip)

    probs, valid = step_probs(model.params, fx, np.zeros((1, n), dtype=bool), None, None)
    lp0 = log_probs_np(probs, valid)[0]
    order0 = np.lexsort((np.arange(n), -lp0))[:min(width, n)]
    tours = order0[:, None]
    cum = lp0[order0]
    lexrank = np.argsort(np.argsort(order0))
    visited = np.zeros((len(order0), n), dtype=bool)
    visited[np.arange(len(order0)), order0] = True

    for _ in range(1, n):
        bm = len(tours)
        probs, valid = step_probs(model.params, fx, visited, tours[:, 0], tours[:, -1])
        lp = log_probs_np(probs, valid)
        scores = (cum[:, None] + lp).ravel()
        parents = np.repeat(np.arange(bm), n)
        nodes = np.tile(np.arange(n), bm)
        finite = np.isfinite(scores)
        take = min(width, int(finite.sum()))
        pick = np.lexsort((nodes, lexrank[parents], -scores))[:take]
        p_sel, v_sel = parents[pick], nodes[pick]
        tours = np.concatenate([tours[p_sel], v_sel[:, None]], axis=1)
        cum = scores[pick]
        visited = visited[p_sel].copy()
        visited[np.arange(take), v_sel] = True
        lexrank = np.argsort(np.lexsort((v_sel, lexrank[p_sel])))

    pts = inst.coords[tours]
    seg = pts - np.roll(pts, -1, axis=1)
    lengths = np.sqrt((seg * seg).sum(axis=2)).sum(axis=1)
    shortest = int(np.argmin(lengths))
    return BeamResult(
        shortest=make_tour(inst, tours[shortest], log_prob=float(cum[shortest])),
        most_probable=make_tour(inst, tours[0], log_prob=float(cum[0])),
        lengths=lengths,
    )


def greedy_decode(model, instances: list[TspInstance], clip: float = DEFAULT_CLIP) -> list[Tour]:
    """Greedy tours for a list of instances, batched per size group."""
    by_n: dict[int, list[int]] = {}
    for i, inst in enumerate(instances):
        by_n.setdefault(inst.n, []).append(i)
    out: list[Tour | None] = [None] * len(instances)
    for n, idxs in by_n.items():
        coords = np.stack([instances[i].coords for i in idxs])
        orders, logp = greedy_rollout(model, coords, clip)
        for row, i in enumerate(idxs):
            out[i] = make_tour(instances[i], orders[row], log_prob=float(logp[row]))
    return out


# ---------------------------------------------------------------------------
# teacher-forced log-likelihood (all steps in parallel)


def teacher_forced_nll(model, coords: np.ndarray, targets: np.ndarray,
                       training: bool = False, clip: float = DEFAULT_CLIP) -> Tensor:
    """Per-instance negative log-likelihood of target tours under the model.

    ``targets`` is (B, n) int; step t is conditioned on the target prefix.
    Returns a (B,) tensor of summed per-step NLL (all n steps, including the
    free start-node choice at step 0).
    """
    bsz, n, _ = coords.shape
    if targets.shape != (bsz, n):
        raise ValueError(f"targets shape {targets.shape} != {(bsz, n)}")
    d = model.config.embed_dim
    heads = model.config.heads
    params = model.params
    fx = precompute_fixed(params, model.encode(coords, training=training), heads, clip)

    onehot = np.zeros((bsz, n, n))
    onehot[np.arange(bsz)[:, None], np.arange(n)[None, :], targets] = 1.0
    seen = np.cumsum(onehot, axis=1)
    visited_before = np.zeros((bsz, n, n), dtype=bool)
    visited_before[:, 1:, :] = seen[:, :-1, :] > 0.5
    valid = ~visited_before  # (B, T, n)

    first_rep = np.repeat(targets[:, :1], n - 1, axis=1)
    ctx_rest = ad.concat([ad.gather_nodes(fx.node, first_rep), ad.gather_nodes(fx.node, targets[:, :-1])], axis=-1)
    ctx0 = ad.broadcast_to(ad.reshape(params["dec.placeholder"], (1, 1, 2 * d)), (bsz, 1, 2 * d))
    ctx = ad.concat([ctx0, ctx_rest], axis=1)  # (B, T, 2d)

    q = ad.add(ad.reshape(fx.graph_ctx, (bsz, 1, d)), ad.matmul(ctx, params["dec.ctx.w"]))
    qh = ad.transpose(ad.reshape(q, (bsz, n, heads, d // heads)), (0, 2, 1, 3))  # (B,H,T,dh)
    scores = ad.mul(ad.matmul(qh, ad.transpose(fx.glimpse_k, (0, 1, 3, 2))), 1.0 / np.sqrt(d // heads))
    attn = ad.softmax(scores, mask=valid[:, None, :, :])
    glimpse = ad.reshape(ad.transpose(ad.matmul(attn, fx.glimpse_v), (0, 2, 1, 3)), (bsz, n, d))
    qf = ad.matmul(glimpse, params["dec.glimpse_out.w"])
    compat = ad.matmul(qf, ad.transpose(fx.logit_k, (0, 2, 1)))  # (B,T,n)
    clipped = ad.mul(ad.tanh(ad.mul(compat, 1.0 / np.sqrt(d))), clip)
    probs = ad.softmax(clipped, mask=valid)
    return ad.neg(ad.tsum(ad.log(ad.take_last(probs, targets)), axis=1))


def evaluate_log_prob(model, inst: TspInstance, order: np.ndarray, clip: float = DEFAULT_CLIP) -> float:
    """Model log-probability of one tour, recomputed step by step."""
    nll = teacher_forced_nll(model, inst.coords[None], np.asarray(order, dtype=np.int64)[None], clip=clip)
    return float(-nll.data[0])
