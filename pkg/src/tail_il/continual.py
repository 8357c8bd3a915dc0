"""Continual adaptation: TAIL, full fine-tuning, frozen features, replay, EWC.

A curriculum is a pretrained base followed by suite-level stages. Each stage
trains with one strategy, evaluates every few epochs, keeps the checkpoint
with the best success on the new suite (its FWT), and then measures how that
model does on every earlier suite (the S_i feeding BWT).
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .adapters import (AdapterBundle, AdapterSpec, attach_encoder_adapters, build_freeze_mask, count_trainable,
                       fpf_bundle, init_adapter, load_bundle, save_bundle)
from .bench import BenchConfig, TaskSpec, TrajectoryDataset, rollout_counts
from .metrics import LedgerError, RunLedger, compute_bwt, compute_fwt
from .policy import GmmParams, PolicyWeights, gmm_log_prob, policy_forward_seq, save_weights, select_action
from .tensor import Tensor
from .train import (TrainConfig, TrainResult, Window, bc_train, collate, epoch_windows, forward_batch,
                    pool_from, sample_windows)

log = logging.getLogger(__name__)

BASELINES = ("fft", "fpf", "er", "ewc")
TAIL_METHODS = ("lora", "bottleneck", "prefix", "roboadapter")
STRATEGIES = tuple(f"tail-{m}" for m in TAIL_METHODS) + BASELINES


class StrategyError(ValueError):
    pass


def parse_strategy(name: str, aspec: AdapterSpec | None = None) -> tuple[str, AdapterSpec | None]:
    """'tail-lora', 'tail-prefix+lora', 'tail' (use aspec as given), or a baseline name."""
    if name in BASELINES:
        return name, None
    base = aspec or AdapterSpec()
    if name == "tail":
        if not base.methods:
            raise StrategyError("strategy 'tail' needs at least one adapter method in the config")
        return "tail", base
    if name.startswith("tail-"):
        methods = tuple(name[5:].split("+"))
        bad = [m for m in methods if m not in TAIL_METHODS]
        if bad or not methods:
            raise StrategyError(f"unknown adapter method(s) {bad} in strategy {name!r}")
        return "tail", base.with_methods(*methods)
    raise StrategyError(f"unknown strategy {name!r}; expected one of {STRATEGIES} or tail-a+b")


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalContext:
    bench: BenchConfig
    R: np.ndarray
    seed: int
    episodes: int = 10
    workers: int = 1


def neural_policy(weights: PolicyWeights, bundle: AdapterBundle | None = None):
    """Wrap a policy (plus optional bundle) as a bench PolicyFn."""

    def act(perc: np.ndarray, prop: np.ndarray, task: TaskSpec, scene) -> np.ndarray:
        E = perc.shape[0]
        emb = np.broadcast_to(task.emb, (E, task.emb.shape[0])).copy()
        g = policy_forward_seq(weights, Tensor(perc), Tensor(prop), Tensor(emb), bundle).last()
        return select_action(g)

    return act


def _eval_one(weights, bundle, task, ctx: EvalContext) -> int:
    return rollout_counts(neural_policy(weights, bundle), task, ctx.episodes, ctx.seed, ctx.R, ctx.bench,
                          weights.spec.max_seq_len)[0]


def evaluate_tasks(weights: PolicyWeights, bundle: AdapterBundle | None, tasks: Sequence[TaskSpec],
                   ctx: EvalContext) -> dict[int, float]:
    """Success rate per task. Tasks fan out over worker processes when allowed."""
    workers = 1 if os.environ.get("TAIL_DETERMINISTIC") == "1" else max(1, ctx.workers)
    if workers == 1 or len(tasks) == 1:
        counts = [_eval_one(weights, bundle, t, ctx) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
            counts = list(ex.map(_eval_one, [weights] * len(tasks), [bundle] * len(tasks), tasks,
                                 [ctx] * len(tasks)))
    return {t.task_id: c / ctx.episodes for t, c in zip(tasks, counts)}


def suite_mean(rates: Mapping) -> float:
    return float(np.mean(list(rates.values())))


# --------------------------------------------------------------------------- experience replay


@dataclass
class ReplayBuffer:
    """Every training trajectory of finished stages, tagged ``suite/task``."""

    pool: list = field(default_factory=list)

    def add(self, ds: TrajectoryDataset) -> None:
        self.pool.extend(pool_from(ds, "train"))

    def __len__(self) -> int:
        return len(self.pool)


def er_sample_batch(buffer: ReplayBuffer, current: TrajectoryDataset | Sequence, batch_size: int,
                    rng: np.random.Generator | int, L: int = 8) -> list[Window]:
    """ceil(B/2) windows from the buffer and floor(B/2) from current data.

    Sampling is uniform over trajectories (with replacement), then uniform
    over timesteps. An empty buffer falls back to an all-current batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    cur = pool_from(current, "train") if isinstance(current, TrajectoryDataset) else list(current)
    if not cur:
        raise ValueError("current dataset is empty")
    if len(buffer) == 0:
        log.info("replay buffer empty (first stage); batch is 100%% current data")
        return sample_windows(cur, batch_size, L, rng)
    n_buf = (batch_size + 1) // 2
    return sample_windows(buffer.pool, n_buf, L, rng) + sample_windows(cur, batch_size - n_buf, L, rng)


# --------------------------------------------------------------------------- EWC


@dataclass
class EwcState:
    fisher: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]
    lam: float = 5e4
    gamma: float = 0.9

    def __post_init__(self):
        if set(self.fisher) != set(self.anchor):
            raise T.ShapeError("fisher and anchor cover different parameters")
        for n, f in self.fisher.items():
            if f.shape != self.anchor[n].shape:
                raise T.ShapeError(f"fisher/anchor shape mismatch for {n}: {f.shape} vs {self.anchor[n].shape}")
            if (f < 0).any():
                raise ValueError(f"negative fisher entries for {n}")


def ewc_penalty(params: Mapping[str, Tensor], state: EwcState | None) -> Tensor:
    """sum_i lam/2 * F_i * (theta_i - theta*_i)^2, differentiable in theta."""
    if state is None or not state.fisher:
        return Tensor(0.0)
    total = None
    for n in sorted(state.fisher):
        p = params.get(n)
        if p is None:
            raise T.ShapeError(f"EWC state covers {n!r} but the model has no such parameter")
        if p.shape != state.fisher[n].shape:
            raise T.ShapeError(f"EWC shape mismatch for {n}: param {p.shape} vs fisher {state.fisher[n].shape}")
        diff = T.sub(p, Tensor(state.anchor[n]))
        term = T.sum(T.mul(T.mul(diff, diff), Tensor(state.fisher[n])))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 0.5 * state.lam)


def ema_fisher(prev: Mapping[str, np.ndarray] | None, new: Mapping[str, np.ndarray],
               gamma: float) -> dict[str, np.ndarray]:
    """F~_k = gamma * F~_{k-1} + (1 - gamma) * F_k; the first stage takes F_1 as is."""
    if prev is None:
        return {n: np.array(v, dtype=np.float64) for n, v in new.items()}
    return {n: gamma * prev[n] + (1.0 - gamma) * new[n] for n in new}


def gmm_sample(params: GmmParams, rng: np.random.Generator) -> np.ndarray:
    """One action per leading index: pick a mode by weight, then draw from it."""
    logits, means, stds = params.numpy()
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    lead = logits.shape[:-1]
    flat_w = w.reshape(-1, w.shape[-1])
    ks = np.array([rng.choice(flat_w.shape[1], p=row) for row in flat_w]).reshape(lead)
    mu = np.take_along_axis(means, ks[..., None, None], axis=-2)[..., 0, :]
    sd = np.take_along_axis(stds, ks[..., None, None], axis=-2)[..., 0, :]
    return mu + sd * rng.standard_normal(mu.shape)


def diagonal_fisher(weights: PolicyWeights, bundle, params: Mapping[str, Tensor], ds: TrajectoryDataset,
                    n_samples: int, rng: np.random.Generator, mode: str = "sampled") -> dict[str, np.ndarray]:
    """Mean squared per-sample gradient of log p(a|s) over sampled training states.

    ``sampled`` draws a ~ p(.|s) from the current policy (the Fisher
    definition); ``empirical`` uses the demonstrated action instead.
    """
    L = weights.spec.max_seq_len
    wins = sample_windows(pool_from(ds, "train"), n_samples, L, rng, last_only=True)
    acc = {n: np.zeros_like(t.data) for n, t in params.items()}
    for w in wins:
        b = collate([w])
        for t in params.values():
            t.requires_grad = True
        try:
            with T.Tape() as tape:
                g = forward_batch(weights, bundle, b, train=False, key=(0,)).last()
                if mode == "sampled":
                    a = gmm_sample(g, rng)
                else:
                    a = b.actions[:, -1]
                lp = T.sum(gmm_log_prob(g, a))
                tape.backward(lp)
                for n, t in params.items():
                    gr = tape.grad(t)
                    if gr is not None:
                        acc[n] += gr * gr
        finally:
            for t in params.values():
                t.requires_grad = False
    return {n: v / len(wins) for n, v in acc.items()}


def fisher_update(state: EwcState | None, ds: TrajectoryDataset, weights: PolicyWeights, cfg: TrainConfig,
                  *, key: Sequence[int] = (0,)) -> EwcState:
    """Fold the finished stage's Fisher into the running average and re-anchor."""
    params = dict(weights.params)
    rng = np.random.default_rng(tuple(key) + (cfg.seed, 77))
    new = diagonal_fisher(weights, None, params, ds, cfg.fisher_samples, rng, cfg.fisher_mode)
    fisher = ema_fisher(state.fisher if state is not None else None, new, cfg.ewc_gamma)
    anchor = {n: t.data.copy() for n, t in params.items()}
    return EwcState(fisher, anchor, cfg.ewc_lambda, cfg.ewc_gamma)


# --------------------------------------------------------------------------- curriculum state


@dataclass
class CurriculumState:
    base: PolicyWeights
    pretrain_digest: str
    strategy: str = ""
    aspec: AdapterSpec | None = None
    datasets: list[TrajectoryDataset] = field(default_factory=list)
    bundles: dict[str, AdapterBundle] = field(default_factory=dict)
    fwt: list[float] = field(default_factory=list)
    buffer: ReplayBuffer = field(default_factory=ReplayBuffer)
    ewc: EwcState | None = None

    @classmethod
    def start(cls, base: PolicyWeights, strategy: str, aspec: AdapterSpec | None = None) -> "CurriculumState":
        kind, sp = parse_strategy(strategy, aspec)
        return cls(base.copy(), base.digest(), strategy, sp)

    def suite_index(self, suite_id: str) -> int:
        for i, d in enumerate(self.datasets):
            if d.suite_id == suite_id:
                return i
        raise LedgerError(f"suite {suite_id!r} was never trained in this curriculum")


def _stage_epochs(ds: TrajectoryDataset, cfg: TrainConfig) -> int:
    kinds = {t.kind for t in ds.tasks}
    return cfg.long_horizon_epochs if kinds == {"long_horizon"} else cfg.epochs


def _snapshot_bundle(b: AdapterBundle) -> AdapterBundle:
    cp = lambda d: {n: Tensor(t.data.copy(), name=n) for n, t in d.items()}  # noqa: E731
    return AdapterBundle(b.suite_id, cp(b.weights), cp(b.fusion_copy), cp(b.head_copy), b.spec, b.base_digest,
                         dict(b.meta))


@dataclass
class StageOutcome:
    checkpoints: list[dict]
    best: int
    fwt: float
    train: TrainResult
    model: PolicyWeights
    bundle: AdapterBundle | None
    counts: dict


def _train_stage(kind: str, sp: AdapterSpec | None, ds: TrajectoryDataset, state: CurriculumState,
                 cfg: TrainConfig, ctx: EvalContext, key: tuple[int, ...],
                 prior: Sequence[TrajectoryDataset] = ()) -> StageOutcome:
    """Train one suite with one strategy and keep its best-success checkpoint."""
    epochs = _stage_epochs(ds, cfg)
    base = state.base
    bundle = None
    batches = penalty = None
    if kind == "tail":
        last = state.datasets[-1].suite_id if state.datasets else None
        prev = state.bundles.get(last)
        bundle = init_adapter(sp, base, prev=prev, seed=_seed(key, 1), suite_id=ds.suite_id)
        mask = build_freeze_mask(base, "tail", bundle)
    elif kind == "fpf":
        prev = state.bundles.get(state.datasets[-1].suite_id) if state.datasets else None
        bundle = fpf_bundle(base, ds.suite_id, prev)
        mask = build_freeze_mask(base, "fpf", bundle)
    else:
        base = base.copy()
        mask = build_freeze_mask(base, "fft")
        if kind == "er":
            batches = _er_batches(state.buffer, ds, cfg, base.spec.max_seq_len)
        elif kind == "ewc" and state.ewc is not None:
            ewc, params = state.ewc, base.params
            penalty = lambda: ewc_penalty(params, ewc)  # noqa: E731
    counts = count_trainable(base, mask, bundle)

    checkpoints: list[dict] = []
    best = {"score": -1.0, "model": None, "bundle": None}
    every = cfg.eval_every_epochs

    def on_epoch(epoch: int, res: TrainResult) -> None:
        if epoch % every and epoch != epochs:
            return
        suites = {ds.suite_id: evaluate_tasks(base, bundle, ds.tasks, ctx)}
        if kind not in ("tail", "fpf"):
            for pd in prior:
                suites[pd.suite_id] = evaluate_tasks(base, None, pd.tasks, ctx)
        score = suite_mean(suites[ds.suite_id])
        checkpoints.append({"checkpoint": len(checkpoints), "epoch": epoch,
                            "suites": {s: {str(t): v for t, v in r.items()} for s, r in suites.items()}})
        log.info("%s epoch %d: success %.3f (train nll %.4f, val nll %.4f)", ds.suite_id, epoch, score,
                 res.train_nll[-1], res.val_nll[-1])
        if score > best["score"]:
            best["score"] = score
            best["model"] = base.copy() if bundle is None else None
            best["bundle"] = _snapshot_bundle(bundle) if bundle is not None else None

    res = bc_train(base, mask, ds, cfg, bundle, epochs=epochs, batches=batches, penalty=penalty,
                   on_epoch=on_epoch, key=key)
    curve = [suite_mean(c["suites"][ds.suite_id]) for c in checkpoints]
    fwt, arg = compute_fwt(curve)
    model = best["model"] if best["model"] is not None else state.base
    return StageOutcome(checkpoints, arg, fwt, res, model, best["bundle"], counts)


def _er_batches(buffer: ReplayBuffer, ds: TrajectoryDataset, cfg: TrainConfig, L: int):
    cur = pool_from(ds, "train")
    n_batches = math.ceil(len(epoch_windows(cur, L, None)) / cfg.batch_size)

    def make(epoch: int, rng: np.random.Generator) -> list[list[Window]]:
        return [er_sample_batch(buffer, cur, cfg.batch_size, rng, L) for _ in range(n_batches)]

    return make


def _seed(key: Sequence[int], salt: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key] + [salt]).generate_state(1)[0])


# --------------------------------------------------------------------------- stages


def adapt_stage(strategy: str, ds: TrajectoryDataset, state: CurriculumState, cfg: TrainConfig,
                ctx: EvalContext, ledger: RunLedger | None = None) -> dict:
    """Run one curriculum stage, update ``state`` and append the stage record to ``ledger``."""
    kind, sp = parse_strategy(strategy, state.aspec)
    if kind == "tail" and sp != state.aspec and state.aspec is not None and state.bundles:
        raise StrategyError("adapter spec changed mid-curriculum")
    if any(d.suite_id == ds.suite_id for d in state.datasets):
        raise StrategyError(f"suite {ds.suite_id!r} already trained in this curriculum; use circle_back")
    k = len(state.datasets) + 1
    t0 = time.perf_counter()
    digest_before = state.base.digest()
    out = _train_stage(kind, sp, ds, state, cfg, ctx, (cfg.seed, k), prior=state.datasets)

    # best checkpoint becomes the model carried forward
    if kind in ("tail", "fpf"):
        state.bundles[ds.suite_id] = out.bundle
    else:
        state.base = out.model
    revisit: dict[str, float] = {}
    if kind in ("tail", "fpf"):
        for pd in state.datasets:
            revisit[pd.suite_id] = suite_mean(evaluate_tasks(state.base, state.bundles[pd.suite_id], pd.tasks, ctx))
    else:
        best_ck = out.checkpoints[out.best]["suites"]
        for pd in state.datasets:
            revisit[pd.suite_id] = suite_mean({int(t): v for t, v in best_ck[pd.suite_id].items()})
    S = [revisit[pd.suite_id] for pd in state.datasets]
    bwt = compute_bwt(state.fwt, S, k) if k >= 2 else None

    if kind == "er":
        state.buffer.add(ds)
    if kind == "ewc":
        state.ewc = fisher_update(state.ewc, ds, state.base, cfg, key=(cfg.seed, k))
    state.datasets.append(ds)
    state.fwt.append(out.fwt)

    record = {
        "stage": k, "suite_id": ds.suite_id, "strategy": strategy,
        "adapter_methods": list(sp.methods) if sp else [],
        "epochs": _stage_epochs(ds, cfg), "success": out.checkpoints,
        "best_checkpoint": out.best, "best_epoch": out.checkpoints[out.best]["epoch"],
        "fwt": out.fwt, "revisit": revisit, "bwt": bwt,
        "base_digest_before": digest_before, "base_digest_after": state.base.digest(),
        "pretrain_digest": state.pretrain_digest,
        "bundle_digest": out.bundle.digest() if out.bundle is not None else None,
        "params": {"trainable": out.counts["trainable"], "total": out.counts["total"],
                   "fraction": out.counts["fraction"], "adapter": out.counts["adapter_params"]},
        "train_nll": out.train.train_nll, "val_nll": out.train.val_nll,
        "er_buffer_size": len(state.buffer) if kind == "er" else None,
    }
    rows = _stage_rows(record)
    if ledger is not None:
        if ledger.path is not None:
            record["artifact"] = _persist(ledger.path, k, ds.suite_id, state, out.bundle)
        ledger.append(record, rows, wall_clock=time.perf_counter() - t0)
    return record


def _persist(root: Path, k: int, suite_id: str, state: CurriculumState, bundle: AdapterBundle | None) -> str:
    name = f"{k:02d}-{suite_id}"
    if bundle is not None:
        rel = f"bundles/{name}"
        save_bundle(bundle, root / rel, state.base.spec)
    else:
        rel = f"checkpoints/{name}"
        save_weights(state.base, root / rel, {"stage": k, "suite_id": suite_id})
    return rel


def _stage_rows(rec: dict) -> list[tuple]:
    k = rec["stage"]
    rows = []
    for e, (tr, va) in enumerate(zip(rec["train_nll"], rec["val_nll"]), start=1):
        rows.append((k, e, "*", "train", "nll", tr))
        rows.append((k, e, "*", "val", "nll", va))
    for ck in rec["success"]:
        for suite, rates in ck["suites"].items():
            for t, v in rates.items():
                rows.append((k, ck["epoch"], f"{suite}/{t}", "eval", "success", v))
    rows.append((k, rec["best_epoch"], rec["suite_id"], "eval", "fwt", rec["fwt"]))
    for suite, v in rec["revisit"].items():
        rows.append((k, rec["best_epoch"], suite, "revisit", "success", v))
    if rec["bwt"] is not None:
        rows.append((k, rec["best_epoch"], rec["suite_id"], "eval", "bwt", rec["bwt"]))
    return rows


def run_curriculum(base: PolicyWeights, datasets: Sequence[TrajectoryDataset], strategy: str, cfg: TrainConfig,
                   ctx: EvalContext, aspec: AdapterSpec | None = None,
                   ledger: RunLedger | None = None) -> tuple[CurriculumState, RunLedger]:
    """Adapt sequentially to every suite in ``datasets``."""
    ledger = ledger if ledger is not None else RunLedger()
    state = CurriculumState.start(base, strategy, aspec)
    ledger.header.update({"strategy": strategy, "pretrain_digest": state.pretrain_digest,
                          "eval_seed": ctx.seed, "train_seed": cfg.seed,
                          "suites": [d.suite_id for d in datasets],
                          "data_seeds": [d.data_seed for d in datasets]})
    for ds in datasets:
        adapt_stage(strategy, ds, state, cfg, ctx, ledger)
    return state, ledger


def circle_back(state: CurriculumState, suite_id: str, cfg: TrainConfig, ctx: EvalContext) -> dict:
    """Revisit an earlier suite from the current model.

    TAIL and FPF reload the stored per-suite bundle; other strategies train
    on the suite's original data again starting from the current weights.
    """
    i = state.suite_index(suite_id)
    ds = state.datasets[i]
    kind, sp = parse_strategy(state.strategy, state.aspec)
    initial = state.fwt[i]
    if kind in ("tail", "fpf"):
        revisit = suite_mean(evaluate_tasks(state.base, state.bundles[suite_id], ds.tasks, ctx))
    else:
        saved = state.datasets
        out = _train_stage(kind, sp, ds, state, cfg, ctx, (cfg.seed, 1000 + i), prior=())
        state.datasets = saved
        revisit = out.fwt
    return {"suite_id": suite_id, "initial": initial, "revisit": revisit}


# --------------------------------------------------------------------------- pretraining


def pretrain(weights: PolicyWeights, ds: TrajectoryDataset, cfg: TrainConfig, ctx: EvalContext,
             aspec: AdapterSpec | None = None, *, epochs: int | None = None) -> tuple[PolicyWeights, dict]:
    """Train the whole model (encoders frozen, encoder LoRA attached) on the pretrain suite."""
    w = weights.copy()
    if not w.group_names("perception_adapter"):
        attach_encoder_adapters(w, aspec or AdapterSpec(), seed=_seed((cfg.seed,), 3))
    mask = build_freeze_mask(w, "pretrain")
    epochs = cfg.epochs if epochs is None else epochs
    curve: list[dict] = []
    best = {"score": -1.0, "w": None}

    def on_epoch(epoch: int, res: TrainResult) -> None:
        if epoch % cfg.eval_every_epochs and epoch != epochs:
            return
        rates = evaluate_tasks(w, None, ds.tasks, ctx)
        score = suite_mean(rates)
        curve.append({"epoch": epoch, "success": score, "tasks": {str(t): v for t, v in rates.items()}})
        log.info("pretrain epoch %d: success %.3f (val nll %.4f)", epoch, score, res.val_nll[-1])
        if score > best["score"]:
            best["score"], best["w"] = score, w.copy()

    res = bc_train(w, mask, ds, cfg, epochs=epochs, on_epoch=on_epoch, key=(cfg.seed, 0))
    final = best["w"]
    record = {"suite_id": ds.suite_id, "epochs": epochs, "success": curve, "best_success": best["score"],
              "train_nll": res.train_nll, "val_nll": res.val_nll, "digest": final.digest()}
    return final, record
