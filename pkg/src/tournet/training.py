"""Training: supervised cross-entropy with teacher forcing, and REINFORCE
with a greedy rollout baseline or a learned critic baseline.

Both paradigms train the identical policy architecture; the paradigm only
changes the loss. Runs are reproducible: one seed drives parameter init,
data generation, rollout sampling and validation sets.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.stats

from . import autodiff as ad
from .autodiff import GradientTape, NonFiniteError, Tensor, uniform_init
from .decoder import greedy_decode, greedy_rollout, sample_rollout, teacher_forced_nll
from .encoders import EncoderConfig, encode, init_encoder
from .model import PolicyModel
from .optim import AdamState, adam_step
from .serialize import load_tensors, save_tensors
from .tsp import (Dataset, HELD_KARP_MAX, TspInstance, canonicalize, generate_instance,
                  held_karp_solve, optimality_gap, tour_lengths_batch)

PARADIGMS = ("sl", "rl")
BASELINES = ("rollout", "critic")
CRITIC_HIDDEN = 128
ROLLOUT_ALPHA = 0.05


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the run is aborted."""


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the full-scale setting is 100 epochs over one
    million instances per epoch at batch 512 with a 3-layer d=128 encoder."""

    paradigm: str = "sl"
    baseline: str = "rollout"      # RL only
    graph_size: int = 10
    epochs: int = 10
    epoch_size: int = 20000
    batch_size: int = 128
    lr: float = 1e-4
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        kind="gat", layers=2, embed_dim=64, heads=4, ff_dim=256))
    val_size: int = 1000
    val_every: int | None = None   # batches between validations; None = each epoch end
    name: str | None = None

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.graph_size < 2 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad graph_size/epochs/batch_size")
        if self.val_size > 0 and self.graph_size > HELD_KARP_MAX:
            raise ValueError(f"validation needs exact optima; graph_size <= {HELD_KARP_MAX} or val_size=0")

    def model_id(self) -> str:
        if self.name:
            return self.name
        tag = self.paradigm if self.paradigm == "sl" else f"rl-{self.baseline}"
        return f"{tag}_tsp{self.graph_size}_{self.encoder.kind}_s{self.seed}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return cls(**d)


@dataclass
class TrainLog:
    batches: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    val_batches: list[int] = field(default_factory=list)
    val_gaps: list[float] = field(default_factory=list)
    val_seconds: list[float] = field(default_factory=list)

    def record(self, batch: int, loss: float, secs: float) -> None:
        if self.batches and batch <= self.batches[-1]:
            raise ValueError("mini-batch counter must increase")
        self.batches.append(batch)
        self.losses.append(loss)
        self.seconds.append(secs)

    def record_val(self, batch: int, gap: float, secs: float) -> None:
        self.val_batches.append(batch)
        self.val_gaps.append(gap)
        self.val_seconds.append(secs)

    def to_csv(self, path) -> None:
        gap_at = dict(zip(self.val_batches, self.val_gaps))
        lines = ["mini_batch,loss,val_gap,seconds"]
        for b, loss, s in zip(self.batches, self.losses, self.seconds):
            gap = gap_at.get(b)
            lines.append(f"{b},{loss!r},{'' if gap is None else repr(gap)},{s:.3f}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# critic


class CriticModel:
    """Same encoder family as the policy, mean-pooled into a small MLP that
    predicts the expected tour length of an instance."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.params, self.bn_states = init_encoder(config, rng)
        d = config.embed_dim
        self.params["critic.fc1.w"] = uniform_init((d, CRITIC_HIDDEN), d, rng)
        self.params["critic.fc1.b"] = uniform_init((CRITIC_HIDDEN,), d, rng)
        self.params["critic.fc2.w"] = uniform_init((CRITIC_HIDDEN, 1), CRITIC_HIDDEN, rng)
        self.params["critic.fc2.b"] = uniform_init((1,), CRITIC_HIDDEN, rng)

    def value(self, coords: np.ndarray, training: bool = False) -> Tensor:
        emb = encode(self.config, self.params, self.bn_states, coords, training)
        h = ad.relu(ad.add(ad.matmul(emb.graph, self.params["critic.fc1.w"]), self.params["critic.fc1.b"]))
        out = ad.add(ad.matmul(h, self.params["critic.fc2.w"]), self.params["critic.fc2.b"])
        return ad.reshape(out, (coords.shape[0],))

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"critic/param/{k}": p.data for k, p in self.params.items()}
        for k, s in self.bn_states.items():
            arrays[f"critic/buffer/{k}.mean"] = s.mean
            arrays[f"critic/buffer/{k}.var"] = s.var
        return arrays


# ---------------------------------------------------------------------------
# single steps


def sl_step(model: PolicyModel, coords: np.ndarray, targets: np.ndarray):
    """Teacher-forced cross-entropy over canonicalized target tours.

    Returns (loss value, gradients). Loss is the batch mean of per-instance
    summed negative log-likelihood, first step included.
    """
    with GradientTape() as tape:
        nll = teacher_forced_nll(model, coords, targets, training=True)
        loss = ad.tmean(nll)
    return float(loss.data), tape.gradients(loss, model.params)


def rl_step_rollout(model: PolicyModel, baseline_model: PolicyModel,
                    coords: np.ndarray, rng: np.random.Generator):
    """REINFORCE with the frozen baseline policy's greedy length as b(s).

    Returns (mean sampled length, gradients). The advantage is a constant in
    the surrogate: grad = mean((L - b) * grad log p).
    """
    base_orders, _ = greedy_rollout(baseline_model, coords)
    base_lengths = tour_lengths_batch(coords, base_orders)
    uniforms = rng.random((coords.shape[0], coords.shape[1]))
    with GradientTape() as tape:
        orders, logp = sample_rollout(model, coords, uniforms, training=True)
        lengths = tour_lengths_batch(coords, orders)
        surrogate = ad.tmean(ad.mul(Tensor(lengths - base_lengths), logp))
    return float(lengths.mean()), tape.gradients(surrogate, model.params)


def rl_step_critic(model: PolicyModel, critic: CriticModel,
                   coords: np.ndarray, rng: np.random.Generator):
    """REINFORCE with a learned value baseline plus the critic's MSE loss.

    Returns (mean sampled length, policy grads, critic loss, critic grads).
    """
    uniforms = rng.random((coords.shape[0], coords.shape[1]))
    with GradientTape() as tape:
        orders, logp = sample_rollout(model, coords, uniforms, training=True)
        lengths = tour_lengths_batch(coords, orders)
        value = critic.value(coords, training=True)
        surrogate = ad.tmean(ad.mul(Tensor(lengths - value.data), logp))
        err = ad.sub(value, Tensor(lengths))
        critic_loss = ad.tmean(ad.mul(err, err))
    pol_grads = tape.gradients(surrogate, model.params)
    cr_grads = tape.gradients(critic_loss, critic.params)
    return float(lengths.mean()), pol_grads, float(critic_loss.data), cr_grads


# ---------------------------------------------------------------------------
# validation and the rollout baseline


@dataclass
class ValSet:
    instances: list[TspInstance]
    opt_lengths: np.ndarray


def make_val_set(n: int, count: int, rng: np.random.Generator) -> ValSet:
    instances = [generate_instance(n, rng) for _ in range(count)]
    opt = np.array([held_karp_solve(inst).length for inst in instances])
    return ValSet(instances, opt)


def validate(model: PolicyModel, val: ValSet) -> float:
    """Mean per-instance greedy optimality gap, in percent.

    References are exact, so gaps clamp at 0 (rounding dust only), matching
    the harness's exact-reference aggregation bit for bit.
    """
    tours = greedy_decode(model, val.instances)
    gaps = np.array([optimality_gap(t.length, o) for t, o in zip(tours, val.opt_lengths)])
    return float(np.maximum(gaps, 0.0).mean())


@dataclass
class BaselineState:
    model: PolicyModel          # frozen copy, replaced wholesale only
    val: ValSet
    mean_length: float          # baseline's greedy mean on val


def paired_t(diff: np.ndarray) -> tuple[float, float]:
    """One-sided paired t-test for H1: mean(diff) < 0.

    Returns (t statistic, p-value). Zero-variance vectors resolve by sign:
    all-zero differences never reject.
    """
    diff = np.asarray(diff, dtype=np.float64)
    n = len(diff)
    sd = diff.std(ddof=1)
    mean = diff.mean()
    if sd == 0.0:
        if mean < 0.0:
            return -np.inf, 0.0
        return 0.0 if mean == 0.0 else np.inf, 1.0
    t = mean / (sd / np.sqrt(n))
    return float(t), float(scipy.stats.t.cdf(t, df=n - 1))


def _greedy_mean(model: PolicyModel, instances: list[TspInstance]) -> tuple[np.ndarray, float]:
    tours = greedy_decode(model, instances)
    lengths = np.array([t.length for t in tours])
    return lengths, float(lengths.mean())


def update_rollout_baseline(model: PolicyModel, baseline: BaselineState,
                            val_rng: np.random.Generator, graph_size: int) -> tuple[BaselineState, bool]:
    """Replace the frozen baseline when the live policy is significantly
    better on the shared validation set; resample the set on replacement."""
    cur_lengths, cur_mean = _greedy_mean(model, baseline.val.instances)
    base_lengths = np.array([t.length for t in greedy_decode(baseline.model, baseline.val.instances)])
    _, p = paired_t(cur_lengths - base_lengths)
    if cur_mean < base_lengths.mean() and p < ROLLOUT_ALPHA:
        new_val = make_val_set(graph_size, len(baseline.val.instances), val_rng)
        frozen = model.clone()
        _, mean_len = _greedy_mean(frozen, new_val.instances)
        return BaselineState(frozen, new_val, mean_len), True
    return baseline, False


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    model: PolicyModel
    log: TrainLog
    config: TrainConfig
    adam: AdamState
    rng_states: dict
    critic: CriticModel | None = None
    critic_adam: AdamState | None = None
    final_val_gap: float | None = None


def _sl_batches(num: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled index stream over a fixed labelled set."""
    while True:
        order = rng.permutation(num)
        for start in range(0, num - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def train(config: TrainConfig, data: Dataset | None = None, progress=None) -> TrainResult:
    """Run the full schedule and return the trained model plus its log.

    SL cycles the provided labelled dataset; RL generates instances on the
    fly. Greedy validation gap is logged every ``val_every`` batches (default:
    each epoch end); the RL rollout baseline is re-tested at each validation.
    """
    say = progress or (lambda msg: None)
    ss = np.random.SeedSequence(config.seed)
    init_rng, data_rng, sample_rng, val_rng = (np.random.default_rng(s) for s in ss.spawn(4))

    info = {"model_id": config.model_id(), "paradigm": config.paradigm,
            "train_size": config.graph_size}
    model = PolicyModel.init(config.encoder, init_rng, info)
    adam = AdamState(model.params, lr=config.lr)
    log = TrainLog()

    n = config.graph_size
    if config.paradigm == "sl":
        if data is None or data.solutions is None:
            raise ValueError("supervised training needs a labelled dataset")
        if any(inst.n != n for inst in data.instances):
            raise ValueError(f"dataset size does not match graph_size={n}")
        if len(data) < config.batch_size:
            raise ValueError(f"dataset of {len(data)} is smaller than one batch of {config.batch_size}")
        all_coords = np.stack([inst.coords for inst in data.instances])
        all_targets = np.stack([canonicalize(t.order) for t in data.solutions])
        batch_stream = _sl_batches(len(data), config.batch_size, data_rng)

    val = make_val_set(n, config.val_size, val_rng) if config.val_size > 0 else None

    critic = None
    critic_adam = None
    baseline = None
    if config.paradigm == "rl":
        if config.baseline == "rollout":
            if val is None:
                raise ValueError("rollout baseline needs val_size > 0")
            frozen = model.clone()
            _, mean_len = _greedy_mean(frozen, val.instances)
            baseline = BaselineState(frozen, val, mean_len)
        else:
            critic = CriticModel(config.encoder, init_rng)
            critic_adam = AdamState(critic.params, lr=config.lr)

    steps_per_epoch = max(1, config.epoch_size // config.batch_size)
    start = time.perf_counter()
    batch_counter = 0
    gap = None

    def run_validation():
        nonlocal baseline, gap, val
        t0 = time.perf_counter()
        gap = validate(model, val)
        log.record_val(batch_counter, gap, time.perf_counter() - t0)
        say(f"batch {batch_counter}: val greedy gap {gap:.3f}%")
        if baseline is not None:
            baseline, replaced = update_rollout_baseline(model, baseline, val_rng, n)
            if replaced:
                val = baseline.val
                say(f"batch {batch_counter}: rollout baseline replaced "
                    f"(val mean {baseline.mean_length:.4f})")

    for epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            try:
                if config.paradigm == "sl":
                    idx = next(batch_stream)
                    loss, grads = sl_step(model, all_coords[idx], all_targets[idx])
                elif config.baseline == "rollout":
                    coords = data_rng.random((config.batch_size, n, 2))
                    loss, grads = rl_step_rollout(model, baseline.model, coords, sample_rng)
                else:
                    coords = data_rng.random((config.batch_size, n, 2))
                    loss, grads, _, cr_grads = rl_step_critic(model, critic, coords, sample_rng)
                    adam_step(critic.params, cr_grads, critic_adam)
            except NonFiniteError as e:
                raise TrainingDiverged(f"batch {batch_counter}: {e}") from e
            if not np.isfinite(loss):
                raise TrainingDiverged(f"batch {batch_counter}: loss is not finite")
            adam_step(model.params, grads, adam)
            batch_counter += 1
            log.record(batch_counter, loss, time.perf_counter() - start)
            if val is not None and config.val_every and batch_counter % config.val_every == 0:
                run_validation()
        if val is not None and not config.val_every:
            run_validation()
        say(f"epoch {epoch + 1}/{config.epochs} done "
            f"(batch {batch_counter}, loss {log.losses[-1] if log.losses else float('nan'):.4f})")

    rng_states = {name: g.bit_generator.state for name, g in
                  [("init", init_rng), ("data", data_rng), ("sample", sample_rng), ("val", val_rng)]}
    return TrainResult(model=model, log=log, config=config, adam=adam, rng_states=rng_states,
                       critic=critic, critic_adam=critic_adam, final_val_gap=gap)


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_KEYS = ("log/batches", "log/losses", "log/seconds",
                   "log/val_batches", "log/val_gaps", "log/val_seconds")


def save_checkpoint(path, result: TrainResult) -> None:
    """Model, optimizer, rng and log in one container, for eval or resume."""
    model = result.model
    arrays = model.state_arrays()
    for k, m in result.adam.m.items():
        arrays[f"adam/m/{k}"] = m
    for k, v in result.adam.v.items():
        arrays[f"adam/v/{k}"] = v
    log = result.log
    arrays["log/batches"] = np.array(log.batches, dtype=np.float64)
    arrays["log/losses"] = np.array(log.losses, dtype=np.float64)
    arrays["log/seconds"] = np.array(log.seconds, dtype=np.float64)
    arrays["log/val_batches"] = np.array(log.val_batches, dtype=np.float64)
    arrays["log/val_gaps"] = np.array(log.val_gaps, dtype=np.float64)
    arrays["log/val_seconds"] = np.array(log.val_seconds, dtype=np.float64)
    if result.critic is not None:
        arrays.update(result.critic.state_arrays())
        for k, m in result.critic_adam.m.items():
            arrays[f"critic_adam/m/{k}"] = m
        for k, v in result.critic_adam.v.items():
            arrays[f"critic_adam/v/{k}"] = v
    header = model.header()
    header["train"] = result.config.to_dict()
    header["adam"] = {"lr": result.adam.lr, "beta1": result.adam.beta1,
                      "beta2": result.adam.beta2, "eps": result.adam.eps,
                      "step": result.adam.step}
    header["rng"] = result.rng_states
    save_tensors(path, arrays, header)


def load_checkpoint(path) -> TrainResult:
    arrays, header = load_tensors(path)
    model = PolicyModel.from_arrays(arrays, header)
    config = TrainConfig.from_dict(header["train"])
    adam = AdamState(model.params, lr=header["adam"]["lr"], beta1=header["adam"]["beta1"],
                     beta2=header["adam"]["beta2"], eps=header["adam"]["eps"])
    adam.step = header["adam"]["step"]
    for k in model.params:
        adam.m[k] = arrays[f"adam/m/{k}"]
        adam.v[k] = arrays[f"adam/v/{k}"]
    log = TrainLog(
        batches=[int(b) for b in arrays["log/batches"]],
        losses=list(arrays["log/losses"]),
        seconds=list(arrays["log/seconds"]),
        val_batches=[int(b) for b in arrays["log/val_batches"]],
        val_gaps=list(arrays["log/val_gaps"]),
        val_seconds=list(arrays["log/val_seconds"]),
    )
    critic = None
    critic_adam = None
    if any(k.startswith("critic/") for k in arrays):
        critic = CriticModel(config.encoder, np.random.default_rng(0))
        for k, p in critic.params.items():
            p.data[...] = arrays[f"critic/param/{k}"]
        for k, s in critic.bn_states.items():
            s.mean[...] = arrays[f"critic/buffer/{k}.mean"]
            s.var[...] = arrays[f"critic/buffer/{k}.var"]
        critic_adam = AdamState(critic.params, lr=adam.lr)
        for k in critic.params:
            critic_adam.m[k] = arrays[f"critic_adam/m/{k}"]
            critic_adam.v[k] = arrays[f"critic_adam/v/{k}"]
    gap = log.val_gaps[-1] if log.val_gaps else None
    return TrainResult(model=model, log=log, config=config, adam=adam,
                       rng_states=header.get("rng", {}), critic=critic,
                       critic_adam=critic_adam, final_val_gap=gap)
