"""Behavioral-cloning training loop: windowed batches, AdamW, warmup + linear decay."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .adapters import AdapterBundle, FreezeMask
from .bench import Trajectory, TrajectoryDataset
from .policy import GmmParams, PolicyWeights, gmm_nll, policy_forward_seq
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


class NumericalError(TrainError):
    """Loss or gradient went non-finite."""


class ScheduleError(ValueError):
    """The configured schedule does not fit the run (e.g. warmup longer than training)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    long_horizon_epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.1
    warmup_steps: int = 500
    schedule: str = "linear"
    eval_every_epochs: int = 5
    seed: int = 0
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_episodes: int = 10
    ewc_lambda: float = 5e4
    ewc_gamma: float = 0.9
    fisher_samples: int = 64
    fisher_mode: str = "sampled"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every_epochs < 1:
            raise ValueError("epochs, batch_size and eval_every_epochs must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.fisher_mode not in ("sampled", "empirical"):
            raise ValueError(f"unknown fisher_mode {self.fisher_mode!r}")
        if not 0.0 <= self.ewc_gamma <= 1.0:
            raise ValueError("ewc_gamma must be in [0, 1]")
        if self.grad_clip < 0 or self.weight_decay < 0:
            raise ValueError("grad_clip and weight_decay must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- optimizer


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then linear decay to zero at ``total``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(total - cfg.warmup_steps, 1)
    return cfg.lr * max(0.0, (total - step) / span)


class AdamW:
    """Adam with decoupled weight decay, applied to matrices only."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for n, p in params.items():
            g = grads[n]
            m = self.m.get(n)
            if m is None:
                m = self.m[n] = np.zeros_like(p.data)
                self.v[n] = np.zeros_like(p.data)
            v = self.v[n]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if lr == 0.0:
                continue
            if c.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * c.weight_decay
            p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + c.adam_eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


# --------------------------------------------------------------------------- batches


@dataclass(frozen=True)
class Window:
    """A slice [start, stop) of one trajectory; loss on positions >= loss_from."""

    traj: Trajectory
    emb: np.ndarray
    start: int
    stop: int
    loss_from: int = 0
    tag: str = ""


Pool = Sequence[tuple[Trajectory, np.ndarray, str]]


def pool_from(ds: TrajectoryDataset, split: str = "train") -> list[tuple[Trajectory, np.ndarray, str]]:
    """(trajectory, instruction embedding, "suite/task" tag) for a split, task-major order."""
    out = []
    for tid, trajs in sorted(ds.split(split).items()):
        emb = ds.task(tid).emb
        out.extend((tr, emb, f"{ds.suite_id}/{tid}") for tr in trajs)
    return out


def epoch_windows(pool: Pool, L: int, rng: np.random.Generator | None) -> list[Window]:
    """Chunk every trajectory into length-L windows so each step is a loss target once.

    With an rng the chunk boundaries shift by a random phase per trajectory,
    so the same step sees different amounts of history across epochs.
    """
    out = []
    for tr, emb, tag in pool:
        n = len(tr)
        phase = int(rng.integers(L)) if rng is not None else 0
        starts = [0] + list(range(phase if phase else L, n, L))
        for a, b in zip(starts, starts[1:] + [n]):
            if b > a:
                out.append(Window(tr, emb, a, b, 0, tag))
    return out


def sample_windows(pool: Pool, n: int, L: int,
                   rng: np.random.Generator, last_only: bool = False) -> list[Window]:
    """Uniform trajectory (with replacement), then uniform timestep; window ends there."""
    out = []
    for _ in range(n):
        tr, emb, tag = pool[int(rng.integers(len(pool)))]
        t = int(rng.integers(len(tr)))
        a = max(0, t - L + 1)
        out.append(Window(tr, emb, a, t + 1, (t - a) if last_only else 0, tag))
    return out


@dataclass
class Batch:
    perception: np.ndarray  # [B, L, P]
    proprio: np.ndarray  # [B, L, S]
    actions: np.ndarray  # [B, L, A]
    mask: np.ndarray  # [B, L]
    emb: np.ndarray  # [B, d]

    def __len__(self) -> int:
        return self.mask.shape[0]


def collate(windows: Sequence[Window]) -> Batch:
    """Right-pad windows to a common length; padded steps are masked out of the loss."""
    if not windows:
        raise TrainError("empty batch")
    L = max(w.stop - w.start for w in windows)
    B = len(windows)
    tr0 = windows[0].traj
    perc = np.zeros((B, L, tr0.perception.shape[1]))
    prop = np.zeros((B, L, tr0.proprio.shape[1]))
    acts = np.zeros((B, L, tr0.actions.shape[1]))
    mask = np.zeros((B, L))
    for i, w in enumerate(windows):
        n = w.stop - w.start
        perc[i, :n] = w.traj.perception[w.start:w.stop]
        prop[i, :n] = w.traj.proprio[w.start:w.stop]
        acts[i, :n] = w.traj.actions[w.start:w.stop]
        mask[i, w.loss_from:n] = 1.0
    emb = np.stack([w.emb for w in windows])
    return Batch(perc, prop, acts, mask, emb)


# --------------------------------------------------------------------------- loss and gradients


def trainable_tensors(weights: PolicyWeights, mask: FreezeMask, bundle: AdapterBundle | None) -> dict[str, Tensor]:
    """Name -> tensor for everything the mask lets the optimizer touch.

    Bundle entries are prefixed ``bundle:`` so they never collide with base names.
    """
    out = {n: weights.params[n] for n in mask.trainable_base()}
    if bundle is not None:
        bt = bundle.tensors()
        for n in mask.trainable_bundle():
            if n in bt:
                out["bundle:" + n] = bt[n]
    return out


def forward_batch(weights: PolicyWeights, bundle, batch: Batch, *, train: bool, key: tuple[int, ...]) -> GmmParams:
    return policy_forward_seq(weights, Tensor(batch.perception), Tensor(batch.proprio), Tensor(batch.emb),
                              bundle, train=train, dropout_key=key)


def loss_and_grads(weights, bundle, batch: Batch, params: Mapping[str, Tensor], *, train: bool,
                   key: tuple[int, ...], penalty: Callable[[], Tensor] | None = None):
    """(nll, total loss, grads) for one batch; grads keyed like ``params``."""
    for t in params.values():
        t.requires_grad = True
    try:
        with T.Tape() as tape:
            nll = gmm_nll(forward_batch(weights, bundle, batch, train=train, key=key), batch.actions, batch.mask)
            loss = nll
            if penalty is not None:
                loss = T.add(loss, penalty())
            if not np.isfinite(loss.data).all():
                raise NumericalError(f"non-finite loss {float(loss.data)} (nll {float(nll.data)})")
            if loss.tape is tape:
                tape.backward(loss)
                grads = {n: _grad_or_zero(tape, t) for n, t in params.items()}
            else:
                grads = {n: np.zeros_like(t.data) for n, t in params.items()}
    finally:
        for t in params.values():
            t.requires_grad = False
    return float(nll.data), float(loss.data), grads


def _grad_or_zero(tape: T.Tape, t: Tensor) -> np.ndarray:
    g = tape.grad(t)
    return np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64)


def eval_nll(weights, bundle, windows: Sequence[Window], batch_size: int) -> float:
    """Masked mean NLL (no dropout) over fixed windows."""
    if not windows:
        return float("nan")
    total, count = 0.0, 0.0
    for i in range(0, len(windows), batch_size):
        b = collate(windows[i:i + batch_size])
        nll = gmm_nll(forward_batch(weights, bundle, b, train=False, key=(0,)), b.actions, b.mask)
        n = b.mask.sum()
        total += float(nll.data) * n
        count += n
    return total / count


# --------------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    steps: int = 0
    grad_norms: list[float] = field(default_factory=list)


BatchSource = Callable[[int, np.random.Generator], list[list[Window]]]


def bc_train(weights: PolicyWeights, mask: FreezeMask, dataset: TrajectoryDataset, cfg: TrainConfig,
             bundle: AdapterBundle | None = None, *, epochs: int | None = None,
             val: Sequence[Window] | None = None, batches: BatchSource | None = None,
             penalty: Callable[[], Tensor] | None = None,
             on_epoch: Callable[[int, TrainResult], None] | None = None,
             key: Sequence[int] = (0,)) -> TrainResult:
    """Minimize mean GMM NLL over windowed demonstrations.

    Parameters outside ``mask`` are never written. ``batches(epoch, rng)``
    overrides the default shuffled chunking (used by replay). ``on_epoch`` is
    called after every epoch with the 1-based epoch number.
    """
    epochs = cfg.epochs if epochs is None else epochs
    L = weights.spec.max_seq_len
    pool = pool_from(dataset, "train")
    if not pool:
        raise TrainError(f"dataset {dataset.suite_id} has no training trajectories")
    if val is None:
        val = epoch_windows(pool_from(dataset, "val"), L, None)
    key = tuple(int(k) for k in key)

    def default_batches(epoch: int, rng: np.random.Generator) -> list[list[Window]]:
        wins = epoch_windows(pool, L, rng)
        order = rng.permutation(len(wins))
        wins = [wins[i] for i in order]
        return [wins[i:i + cfg.batch_size] for i in range(0, len(wins), cfg.batch_size)]

    make = batches or default_batches
    per_epoch = len(make(0, np.random.default_rng(key + (cfg.seed, 0))))
    total = per_epoch * epochs
    if cfg.warmup_steps > total:
        raise ScheduleError(f"warmup_steps {cfg.warmup_steps} exceeds total steps {total}")

    params = trainable_tensors(weights, mask, bundle)
    opt = AdamW(cfg)
    res = TrainResult()
    step = 0
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng(key + (cfg.seed, epoch))
        losses, sizes = [], []
        for bw in make(epoch, rng):
            batch = collate(bw)
            nll, _, grads = loss_and_grads(weights, bundle, batch, params, train=True,
                                           key=key + (cfg.seed, step), penalty=penalty)
            norm = clip_global_norm(grads, cfg.grad_clip)
            if not math.isfinite(norm):
                raise NumericalError(f"non-finite gradient norm at step {step} (epoch {epoch})")
            opt.step(params, grads, lr_at(step, total, cfg))
            losses.append(nll)
            sizes.append(batch.mask.sum())
            res.grad_norms.append(norm)
            step += 1
        res.train_nll.append(float(np.dot(losses, sizes) / np.sum(sizes)))
        res.val_nll.append(eval_nll(weights, bundle, val, cfg.batch_size))
        res.steps = step
        if on_epoch is not None:
            on_epoch(epoch, res)
    return res
