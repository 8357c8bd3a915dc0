"""Synthetic 2-D pick-and-place suites with scripted experts.

A point-mass agent moves in the unit square with a binary gripper. Tasks ask
for a target object to be carried into a circular goal region (two objects
in sequence for long-horizon tasks). The goal is never observed directly:
the policy only sees a frozen random projection of the scene ("perception"),
its own proprio state, and the task's frozen instruction embedding.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import CheckpointError, read_arrays, write_arrays

log = logging.getLogger(__name__)

KINDS = ("pretrain", "spatial", "goal", "object", "long_horizon")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
EVAL_SEED_BASE = 2**31
_MAX_RETRIES = 20


class BenchError(RuntimeError):
    pass


class ExpertFailure(BenchError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    n_objects: int = 4
    embed_dim: int = 64
    perception_dim: int = 32
    grip_radius: float = 0.05
    goal_radius: float = 0.08
    max_speed: float = 0.08
    grip_threshold: float = 0.5
    horizon: int = 60
    placement_jitter: float = 0.03
    agent_margin: float = 0.1
    min_separation: float = 0.18
    n_demos: int = 50
    n_train: int = 40
    demo_noise: float = 0.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise BenchError(f"unknown bench keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def state_vec_dim(self) -> int:
        return 3 + 2 * self.n_objects


@dataclass(frozen=True)
class TaskSpec:
    suite_id: str
    task_id: int
    kind: str
    object_centers: tuple[tuple[float, float], ...]
    targets: tuple[int, ...]
    goals: tuple[tuple[float, float], ...]
    goal_radius: float
    instruction_emb: tuple[float, ...]
    horizon: int = 60
    jitter: float = 0.03
    agent_margin: float = 0.1

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        d = dict(d)
        d["object_centers"] = tuple(tuple(c) for c in d["object_centers"])
        d["goals"] = tuple(tuple(g) for g in d["goals"])
        d["targets"] = tuple(d["targets"])
        d["instruction_emb"] = tuple(d["instruction_emb"])
        return cls(**d)

    @property
    def emb(self) -> np.ndarray:
        return np.asarray(self.instruction_emb, dtype=np.float64)


@dataclass
class SceneState:
    """Batched scene: E parallel episodes."""

    agent: np.ndarray  # [E, 2]
    holding: np.ndarray  # [E] object index or -1
    objects: np.ndarray  # [E, n_obj, 2]
    step: np.ndarray  # [E]

    def copy(self) -> "SceneState":
        return SceneState(self.agent.copy(), self.holding.copy(), self.objects.copy(), self.step.copy())

    def vector(self) -> np.ndarray:
        """Full scene vector, centered: [agent, holding flag, objects...] -> [E, 3 + 2n]."""
        E = self.agent.shape[0]
        return np.concatenate([2 * self.agent - 1, (self.holding >= 0)[:, None] * 2.0 - 1.0,
                               (2 * self.objects - 1).reshape(E, -1)], axis=1)

    def proprio(self) -> np.ndarray:
        return np.concatenate([2 * self.agent - 1, (self.holding >= 0)[:, None] * 2.0 - 1.0], axis=1)


# --------------------------------------------------------------------------- suites


def _sample_points(rng, n, lo, hi, min_sep, avoid=(), avoid_sep=0.0, tries=2000):
    pts: list[np.ndarray] = []
    for _ in range(tries):
        p = rng.uniform(lo, hi, size=2)
        if all(np.linalg.norm(p - q) >= min_sep for q in pts) and all(
                np.linalg.norm(p - q) >= avoid_sep for q in avoid):
            pts.append(p)
            if len(pts) == n:
                return [tuple(float(v) for v in q) for q in pts]
    raise BenchError(f"could not place {n} points with separation {min_sep}")


def make_suite(kind: str, n_tasks: int, seed: int, cfg: BenchConfig = BenchConfig(),
               suite_id: str | None = None) -> list[TaskSpec]:
    """Deterministic task list for a suite kind.

    pretrain: independent random layout/target/goal per task.
    spatial: shared target and goal, a different object layout per task.
    goal: one layout and target, distinct goal regions.
    object: one layout and goal, distinct target object per task.
    long_horizon: two objects to two regions, in order.
    """
    if kind not in KINDS:
        raise BenchError(f"unknown suite kind {kind!r}")
    if n_tasks < 1:
        raise BenchError("n_tasks must be >= 1")
    if kind == "object" and n_tasks > cfg.n_objects:
        raise BenchError(f"object suite needs one object per task: {n_tasks} tasks > {cfg.n_objects} objects")
    suite_id = suite_id or f"{kind}-{seed}"
    rng = np.random.default_rng([seed, _KIND_CODE[kind], n_tasks])
    eps = cfg.goal_radius
    lo, hi = 0.15, 0.85

    def layout():
        return _sample_points(rng, cfg.n_objects, lo, hi, cfg.min_separation)

    def goals_for(objs, n, sep):
        return _sample_points(rng, n, lo, hi, sep, avoid=[np.array(o) for o in objs], avoid_sep=cfg.min_separation)

    specs = []
    if kind in ("goal", "object"):
        shared = layout()
    if kind == "spatial":
        target = int(rng.integers(cfg.n_objects))
    if kind == "object":
        goal = goals_for(shared, 1, 0.0)[0]
        targets = rng.permutation(cfg.n_objects)[:n_tasks]
    if kind == "goal":
        target = int(rng.integers(cfg.n_objects))
        try:
            goal_list = goals_for(shared, n_tasks, 2 * eps)
        except BenchError as exc:
            raise BenchError(f"goal suite cannot fit {n_tasks} distinct goal regions") from exc
    spatial_goal = None
    for t in range(n_tasks):
        if kind == "pretrain":
            objs = layout()
            tg = (int(rng.integers(cfg.n_objects)),)
            gl = tuple(goals_for(objs, 1, 0.0))
        elif kind == "spatial":
            while True:
                objs = layout()
                if spatial_goal is None:
                    spatial_goal = goals_for(objs, 1, 0.0)[0]
                if all(np.linalg.norm(np.array(spatial_goal) - np.array(o)) >= cfg.min_separation for o in objs):
                    break
            tg, gl = (target,), (spatial_goal,)
        elif kind == "goal":
            objs, tg, gl = shared, (target,), (goal_list[t],)
        elif kind == "object":
            objs, tg, gl = shared, (int(targets[t]),), (goal,)
        else:
            objs = layout()
            pair = rng.choice(cfg.n_objects, size=2, replace=False)
            tg = (int(pair[0]), int(pair[1]))
            gl = tuple(goals_for(objs, 2, 2 * eps + 0.02))
        emb = rng.normal(size=cfg.embed_dim)
        specs.append(TaskSpec(suite_id, t, kind, tuple(objs), tg, gl, eps,
                              tuple(float(v) for v in emb), cfg.horizon, cfg.placement_jitter, cfg.agent_margin))
    return specs


# --------------------------------------------------------------------------- dynamics


def reset(task: TaskSpec, seeds: Sequence[int]) -> SceneState:
    """Sample initial states from the task's placement boxes, one per seed."""
    E = len(seeds)
    n = len(task.object_centers)
    agent = np.empty((E, 2))
    objects = np.empty((E, n, 2))
    centers = np.asarray(task.object_centers)
    for e, s in enumerate(seeds):
        rng = np.random.default_rng(int(s))
        objects[e] = centers + rng.uniform(-task.jitter, task.jitter, size=(n, 2))
        agent[e] = rng.uniform(task.agent_margin, 1 - task.agent_margin, size=2)
    return SceneState(agent, np.full(E, -1, dtype=np.int64), objects, np.zeros(E, dtype=np.int64))


def _clip_norm(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(norm > 1.0, v / np.maximum(norm, 1e-12), v)


def step(state: SceneState, action: np.ndarray, cfg: BenchConfig = BenchConfig()) -> SceneState:
    """Pure transition. Actions are (vx, vy, grip) with velocity in max-speed units."""
    s = state.copy()
    a = np.asarray(action, dtype=np.float64).reshape(s.agent.shape[0], 3)
    grip = a[:, 2] > cfg.grip_threshold
    dist = np.linalg.norm(s.objects - s.agent[:, None, :], axis=-1)
    nearest = np.argmin(dist, axis=1)
    in_reach = dist[np.arange(len(nearest)), nearest] <= cfg.grip_radius
    pick = grip & (s.holding < 0) & in_reach
    s.holding = np.where(pick, nearest, s.holding)
    s.holding = np.where(~grip, -1, s.holding)
    s.agent = np.clip(s.agent + cfg.max_speed * _clip_norm(a[:, :2]), 0.0, 1.0)
    held = s.holding >= 0
    idx = np.nonzero(held)[0]
    s.objects[idx, s.holding[idx]] = s.agent[idx]
    s.objects = np.clip(s.objects, 0.0, 1.0)
    s.step = s.step + 1
    return s


def subgoals_met(state: SceneState, task: TaskSpec) -> np.ndarray:
    """[E, n_subgoals] bool: object placed (and released) inside its goal region."""
    out = []
    for obj, goal in zip(task.targets, task.goals):
        d = np.linalg.norm(state.objects[:, obj] - np.asarray(goal), axis=-1)
        out.append((d <= task.goal_radius) & (state.holding != obj))
    return np.stack(out, axis=1)


def success(state: SceneState, task: TaskSpec) -> np.ndarray:
    return subgoals_met(state, task).all(axis=1)


def expert_action(state: SceneState, task: TaskSpec, cfg: BenchConfig = BenchConfig()) -> np.ndarray:
    """Proportional scripted controller: reach, grip, carry, release."""
    E = state.agent.shape[0]
    met = subgoals_met(state, task)
    # first unmet subgoal (or the last one once everything is placed)
    k = np.where(met.all(axis=1), met.shape[1] - 1, np.argmin(met, axis=1))
    targets = np.asarray(task.targets)[k]
    goals = np.asarray(task.goals)[k]
    obj = state.objects[np.arange(E), targets]
    act = np.zeros((E, 3))
    to_obj = obj - state.agent
    to_goal = goals - state.agent
    carrying = state.holding == targets
    wrong = (state.holding >= 0) & ~carrying
    at_goal = np.linalg.norm(to_goal, axis=-1) < 0.5 * task.goal_radius
    near_obj = np.linalg.norm(to_obj, axis=-1) <= cfg.grip_radius

    move = np.where(carrying[:, None], to_goal, to_obj) / cfg.max_speed
    act[:, :2] = _clip_norm(move)
    act[:, 2] = np.where(carrying | near_obj, 1.0, 0.0)
    release = (carrying & at_goal) | wrong
    act[release] = 0.0
    done = met.all(axis=1)
    act[done] = 0.0
    return act


# --------------------------------------------------------------------------- observations and seeds


def perception_matrix(data_seed: int, cfg: BenchConfig = BenchConfig()) -> np.ndarray:
    """Frozen random projection of the scene vector (stand-in for a frozen vision encoder)."""
    rng = np.random.default_rng([data_seed, 7919])
    return rng.normal(0.0, 1.0 / np.sqrt(cfg.state_vec_dim), size=(cfg.perception_dim, cfg.state_vec_dim))


def observe(state: SceneState, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return state.vector() @ R.T, state.proprio()


def _derive(parts: Sequence[int]) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0]) & 0x7FFFFFFF


def _suite_code(suite_id: str) -> int:
    return int.from_bytes(suite_id.encode()[:8].ljust(8, b"\0"), "little") & 0xFFFFFFFF


def demo_seed(task: TaskSpec, index: int, seed: int, retry: int = 0) -> int:
    """Seed in [0, 2^31): demo initial states."""
    return _derive([seed, _suite_code(task.suite_id), task.task_id, index, retry, 0])


def eval_seed(task: TaskSpec, episode: int, seed: int) -> int:
    """Seed in [2^31, 2^32): evaluation initial states, disjoint from demo seeds."""
    return EVAL_SEED_BASE + _derive([seed, _suite_code(task.suite_id), task.task_id, episode, 1])


# --------------------------------------------------------------------------- demonstrations


@dataclass
class Trajectory:
    perception: np.ndarray  # [T, P]
    proprio: np.ndarray  # [T, 3]
    actions: np.ndarray  # [T, 3]
    seed: int
    final: np.ndarray  # final scene vector

    def __len__(self) -> int:
        return self.actions.shape[0]


@dataclass
class TrajectoryDataset:
    suite_id: str
    tasks: list[TaskSpec]
    trajectories: dict[int, list[Trajectory]]
    data_seed: int
    n_train: int = 40
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> dict[int, list[Trajectory]]:
        if name == "train":
            return {t: trajs[: self.n_train] for t, trajs in self.trajectories.items()}
        if name == "val":
            return {t: trajs[self.n_train:] for t, trajs in self.trajectories.items()}
        if name == "all":
            return self.trajectories
        raise ValueError(f"unknown split {name!r}")

    def task(self, task_id: int) -> TaskSpec:
        return self.tasks[task_id]

    def num_steps(self, split: str = "train") -> int:
        return sum(len(tr) for trs in self.split(split).values() for tr in trs)


def rollout_expert(task: TaskSpec, seed: int, R: np.ndarray, cfg: BenchConfig) -> tuple[Trajectory, bool]:
    """One demonstration. With ``cfg.demo_noise`` the expert's action is
    perturbed by seeded Gaussian noise; the executed (noisy) action is what
    gets recorded, so replaying the stored actions reproduces the episode."""
    s = reset(task, [seed])
    noise = np.random.default_rng([seed, 1]) if cfg.demo_noise > 0 else None
    perc, prop, acts = [], [], []
    ok = False
    for _ in range(task.horizon):
        p, q = observe(s, R)
        a = expert_action(s, task, cfg)
        if noise is not None:
            a = a + noise.normal(0.0, cfg.demo_noise, a.shape)
        perc.append(p[0])
        prop.append(q[0])
        acts.append(a[0])
        s = step(s, a, cfg)
        if success(s, task)[0]:
            ok = True
            break
    traj = Trajectory(np.array(perc), np.array(prop), np.array(acts), int(seed), s.vector()[0])
    return traj, ok


def generate_demos(task: TaskSpec, n: int, seed: int, R: np.ndarray, cfg: BenchConfig = BenchConfig()) -> list[Trajectory]:
    """n successful expert rollouts from i.i.d. initial states (retrying failures)."""
    out = []
    for i in range(n):
        for retry in range(_MAX_RETRIES):
            traj, ok = rollout_expert(task, demo_seed(task, i, seed, retry), R, cfg)
            if ok:
                out.append(traj)
                break
        else:
            raise ExpertFailure(f"expert failed {_MAX_RETRIES} times on {task.suite_id}/{task.task_id}: "
                                f"objects={task.object_centers} targets={task.targets} goals={task.goals}")
    return out


def build_dataset(tasks: list[TaskSpec], data_seed: int, cfg: BenchConfig = BenchConfig(),
                  n: int | None = None, n_train: int | None = None) -> TrajectoryDataset:
    R = perception_matrix(data_seed, cfg)
    n = cfg.n_demos if n is None else n
    n_train = cfg.n_train if n_train is None else n_train
    trajs = {t.task_id: generate_demos(t, n, data_seed, R, cfg) for t in tasks}
    return TrajectoryDataset(tasks[0].suite_id, tasks, trajs, data_seed, n_train)


DATASET_VERSION = 1


def save_dataset(ds: TrajectoryDataset, path) -> Path:
    arrays = {}
    seeds = {}
    for tid, trajs in ds.trajectories.items():
        seeds[str(tid)] = [tr.seed for tr in trajs]
        for j, tr in enumerate(trajs):
            key = f"{tid:03d}/{j:04d}"
            arrays[f"{key}/perception"] = tr.perception
            arrays[f"{key}/proprio"] = tr.proprio
            arrays[f"{key}/actions"] = tr.actions
            arrays[f"{key}/final"] = tr.final
    meta = {"dataset_version": DATASET_VERSION, "suite_id": ds.suite_id, "data_seed": ds.data_seed,
            "n_train": ds.n_train, "tasks": [t.to_dict() for t in ds.tasks], "seeds": seeds,
            "counts": {str(t): len(v) for t, v in ds.trajectories.items()}, "extra": ds.meta}
    return write_arrays(path, arrays, meta=meta, kind="dataset")


def load_dataset(path) -> TrajectoryDataset:
    arrays, manifest = read_arrays(path)
    if manifest.get("kind") != "dataset":
        raise CheckpointError(f"{path} is not a trajectory dataset")
    meta = manifest["meta"]
    if meta.get("dataset_version") != DATASET_VERSION:
        raise CheckpointError(f"unsupported dataset version {meta.get('dataset_version')!r}")
    tasks = [TaskSpec.from_dict(t) for t in meta["tasks"]]
    trajs: dict[int, list[Trajectory]] = {}
    for tid_s, count in meta["counts"].items():
        tid = int(tid_s)
        trajs[tid] = []
        for j in range(count):
            key = f"{tid:03d}/{j:04d}"
            trajs[tid].append(Trajectory(arrays[f"{key}/perception"], arrays[f"{key}/proprio"],
                                         arrays[f"{key}/actions"], int(meta["seeds"][tid_s][j]),
                                         arrays[f"{key}/final"]))
    return TrajectoryDataset(meta["suite_id"], tasks, trajs, int(meta["data_seed"]), int(meta["n_train"]),
                             meta.get("extra", {}))


# --------------------------------------------------------------------------- evaluation

# (perception history [E, t, P], proprio history [E, t, 3], task, scene) -> actions [E, 3]
PolicyFn = Callable[[np.ndarray, np.ndarray, TaskSpec, SceneState], np.ndarray]


def expert_policy(cfg: BenchConfig = BenchConfig()) -> PolicyFn:
    return lambda perc, prop, task, scene: expert_action(scene, task, cfg)


def rollout_eval(policy: PolicyFn, task: TaskSpec, n_episodes: int, seed: int, R: np.ndarray,
                 cfg: BenchConfig = BenchConfig(), history: int = 8) -> float:
    """Closed-loop success rate over n_episodes unseen initial states."""
    return rollout_counts(policy, task, n_episodes, seed, R, cfg, history)[0] / n_episodes


def rollout_counts(policy: PolicyFn, task: TaskSpec, n_episodes: int, seed: int, R: np.ndarray,
                   cfg: BenchConfig = BenchConfig(), history: int = 8) -> tuple[int, np.ndarray]:
    seeds = [eval_seed(task, e, seed) for e in range(n_episodes)]
    s = reset(task, seeds)
    done = np.zeros(n_episodes, dtype=bool)
    failed = np.zeros(n_episodes, dtype=bool)
    perc_hist: list[np.ndarray] = []
    prop_hist: list[np.ndarray] = []
    for _ in range(task.horizon):
        p, q = observe(s, R)
        perc_hist = (perc_hist + [p])[-history:]
        prop_hist = (prop_hist + [q])[-history:]
        a = np.asarray(policy(np.stack(perc_hist, 1), np.stack(prop_hist, 1), task, s), dtype=np.float64)
        bad = ~np.isfinite(a).all(axis=1)
        if bad.any():
            log.warning("non-finite action in %d episode(s) of %s/%d; counting as failed",
                        int((bad & ~done).sum()), task.suite_id, task.task_id)
            failed |= bad
            a = np.where(bad[:, None], 0.0, a)
        active = ~(done | failed)
        nxt = step(s, a, cfg)
        for attr in ("agent", "holding", "objects", "step"):
            cur = getattr(s, attr)
            new = getattr(nxt, attr)
            mask = active.reshape((-1,) + (1,) * (cur.ndim - 1))
            setattr(s, attr, np.where(mask, new, cur))
        done |= active & success(s, task)
        if (done | failed).all():
            break
    return int((done & ~failed).sum()), done & ~failed
