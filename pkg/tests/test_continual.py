import dataclasses
import math
from collections import Counter

import numpy as np
import pytest

from tail_il import adapters as A
from tail_il import bench as B
from tail_il import continual as C
from tail_il import policy as P
from tail_il import tensor as T
from tail_il.metrics import LedgerError, RunLedger, compute_bwt, compute_fwt
from tail_il.tensor import Tensor, grad_check
from tail_il.train import TrainConfig, bc_train, pool_from

from _tiny import TINY_BENCH, tiny_dataset, tiny_spec

CTX = C.EvalContext(TINY_BENCH, B.perception_matrix(5, TINY_BENCH), 77, 2)
ASPEC = A.AdapterSpec(lora_rank=2, bottleneck_size=4, roboadapter_size=4, prefix_len=3, prefix_rank=2)
FAST = TrainConfig(epochs=2, batch_size=16, lr=3e-3, warmup_steps=0, eval_every_epochs=1, fisher_samples=4)


def _suites():
    return [tiny_dataset("spatial", suite_id="spatial"), tiny_dataset("goal", suite_id="goal")]


# --------------------------------------------------------------------------- metrics


def test_fwt_examples():
    assert compute_fwt([0.2, 0.5, 0.4]) == (0.5, 1)
    assert compute_fwt([0.3, 0.3]) == (0.3, 0)
    with pytest.raises(ValueError):
        compute_fwt([])


def test_bwt_examples():
    assert compute_bwt([0.8], [0.3], 2) == -0.5
    assert compute_bwt([0.5, 0.5], [0.5, 0.7], 3) == pytest.approx(0.1, abs=1e-15)
    with pytest.raises(ValueError):
        compute_bwt([0.8], [0.3], 1)
    with pytest.raises(ValueError):
        compute_bwt([0.8, 0.4], [0.3, None], 3)
    with pytest.raises(ValueError):
        compute_bwt([0.8], [], 2)


def test_parse_strategy():
    assert C.parse_strategy("fft") == ("fft", None)
    kind, sp = C.parse_strategy("tail-prefix+lora")
    assert kind == "tail" and sp.methods == ("prefix", "lora")
    for bad in ("tail-adapterfusion", "packnet", "tail-"):
        with pytest.raises(C.StrategyError):
            C.parse_strategy(bad)
    with pytest.raises(C.StrategyError):
        C.parse_strategy("tail", A.AdapterSpec(methods=()))


# --------------------------------------------------------------------------- EWC


def test_ewc_penalty_scalar_case():
    st = C.EwcState({"w": np.array([2e-5])}, {"w": np.array([0.0])}, lam=5e4)
    val = C.ewc_penalty({"w": Tensor(np.array([0.1]))}, st)
    assert abs(float(val.data) - 0.005) < 1e-12
    assert float(C.ewc_penalty({"w": Tensor(np.array([0.0]))}, st).data) == 0.0
    assert float(C.ewc_penalty({"w": Tensor(np.array([0.1]))}, None).data) == 0.0


def test_ewc_penalty_gradient():
    rng = np.random.default_rng(0)
    F, anchor = rng.uniform(0.1, 1.0, (3, 4)), rng.normal(size=(3, 4))
    st = C.EwcState({"w": F}, {"w": anchor}, lam=50.0)
    theta = rng.normal(size=(3, 4))
    assert grad_check(lambda x: C.ewc_penalty({"w": x}, st), theta) < 1e-6
    x = Tensor(theta, requires_grad=True)
    with T.Tape() as tape:
        out = C.ewc_penalty({"w": x}, st)
        tape.backward(out)
        np.testing.assert_allclose(tape.grad(x), 50.0 * F * (theta - anchor), rtol=1e-12)
    assert float(out.data) >= 0


def test_ewc_state_validation():
    with pytest.raises(T.ShapeError):
        C.EwcState({"w": np.ones(2)}, {"w": np.ones(3)})
    with pytest.raises(ValueError):
        C.EwcState({"w": -np.ones(2)}, {"w": np.ones(2)})
    st = C.EwcState({"w": np.ones(2)}, {"w": np.ones(2)})
    with pytest.raises(T.ShapeError):
        C.ewc_penalty({"w": Tensor(np.ones(3))}, st)


def test_fisher_ema():
    assert C.ema_fisher({"w": np.array(1.0)}, {"w": np.array(2.0)}, 0.9)["w"] == pytest.approx(1.1, abs=1e-15)
    first = C.ema_fisher(None, {"w": np.array([3.0])}, 0.9)
    assert first["w"].tolist() == [3.0]


def test_gaussian_fisher_is_inverse_variance():
    sigma, mu, N = 0.5, 0.3, 100_000
    rng = np.random.default_rng(0)
    means = Tensor(np.full((N, 1, 1), mu), requires_grad=True)
    g = P.GmmParams(Tensor(np.zeros((N, 1))), means, Tensor(np.full((N, 1, 1), sigma)))
    a = C.gmm_sample(g, rng)
    with T.Tape() as tape:
        lp = T.sum(P.gmm_log_prob(g, a))
        tape.backward(lp)
        per_sample = tape.grad(means).reshape(-1)
    fisher = np.mean(per_sample ** 2)
    assert abs(fisher * sigma ** 2 - 1.0) < 0.05


def test_fisher_update_first_stage_and_anchor():
    w = P.init_weights(tiny_spec(), 0)
    st = C.fisher_update(None, tiny_dataset(), w, FAST)
    assert set(st.fisher) == set(w.params)
    assert all((f >= 0).all() for f in st.fisher.values())
    assert any(f.any() for f in st.fisher.values())
    assert all(st.anchor[n].tobytes() == t.data.tobytes() for n, t in w.params.items())
    assert float(C.ewc_penalty(w.params, st).data) == 0.0
    again = C.fisher_update(st, tiny_dataset(), w, FAST)
    n = "head.w2"
    np.testing.assert_allclose(again.fisher[n], 0.9 * st.fisher[n] + 0.1 * st.fisher[n], rtol=1e-12)


# --------------------------------------------------------------------------- ER


def _buffer(*kinds):
    buf = C.ReplayBuffer()
    for k in kinds:
        buf.add(tiny_dataset(k, suite_id=k))
    return buf


@pytest.mark.parametrize("bsz", [1, 2, 7, 10, 64])
def test_er_batch_split(bsz):
    buf = _buffer("spatial")
    cur = tiny_dataset("goal", suite_id="goal")
    batch = C.er_sample_batch(buf, cur, bsz, 0, 4)
    tags = [w.tag.split("/")[0] for w in batch]
    assert tags.count("spatial") == math.ceil(bsz / 2) and tags.count("goal") == bsz // 2
    assert all(w.stop - w.start <= 4 for w in batch)


def test_er_empty_buffer_uses_current():
    batch = C.er_sample_batch(C.ReplayBuffer(), tiny_dataset("goal", suite_id="goal"), 10, 0)
    assert len(batch) == 10 and all(w.tag.startswith("goal/") for w in batch)


def test_er_buffer_sampling_is_uniform():
    buf = _buffer("spatial", "object")  # 4 tasks x 4 train demos
    cur = tiny_dataset("goal", suite_id="goal")
    rng = np.random.default_rng(0)
    counts = Counter()
    for _ in range(10_000):
        counts.update(w.tag for w in C.er_sample_batch(buf, cur, 10, rng)[:5])
    obs = np.array([counts[t] for t in sorted({tag for _, _, tag in buf.pool})], float)
    assert len(obs) == 4
    exp = obs.sum() / len(obs)
    chi2 = float(((obs - exp) ** 2 / exp).sum())
    assert chi2 < 11.345  # chi-square(3) upper 1% point
    assert np.abs(obs - exp).max() < 3 * math.sqrt(exp)


def test_er_buffer_grows_by_train_demos():
    state, _ = C.run_curriculum(P.init_weights(tiny_spec(), 0), _suites(), "er", FAST, CTX, ASPEC)
    assert len(state.buffer) == sum(len(pool_from(d, "train")) for d in _suites())


# --------------------------------------------------------------------------- training


def test_zero_lr_leaves_weights_unchanged():
    w = P.init_weights(tiny_spec(), 0)
    before = w.digest()
    res = bc_train(w, A.build_freeze_mask(w, "fft"), tiny_dataset(), dataclasses.replace(FAST, lr=0.0, epochs=3))
    assert w.digest() == before
    assert len(set(res.val_nll)) == 1


def test_frozen_params_stay_bit_identical():
    w = P.init_weights(tiny_spec(), 0)
    mask = A.build_freeze_mask(w, "pretrain")
    frozen = {n: w.params[n].data.tobytes() for n, t in mask.base.items() if not t}
    assert frozen
    bc_train(w, mask, tiny_dataset(), FAST)
    assert all(w.params[n].data.tobytes() == b for n, b in frozen.items())


def test_overfit_single_pair():
    spec = tiny_spec(gmm_modes=1, dropout=0.0)
    ds = tiny_dataset()
    tr = ds.trajectories[0][0]
    one = B.Trajectory(tr.perception[:1], tr.proprio[:1], tr.actions[:1], tr.seed, tr.final)
    single = B.TrajectoryDataset(ds.suite_id, ds.tasks[:1], {0: [one, one]}, ds.data_seed, n_train=1)
    w = P.init_weights(spec, 0)
    cfg = TrainConfig(epochs=200, batch_size=1, lr=1e-2, warmup_steps=0, schedule="constant", weight_decay=0.0)
    res = bc_train(w, A.build_freeze_mask(w, "fft"), single, cfg)
    assert all(b < a for a, b in zip(res.train_nll[:10], res.train_nll[1:10]))
    floor = 0.5 * spec.action_dim * math.log(2 * math.pi * spec.gmm_min_std ** 2)
    assert res.val_nll[-1] < res.val_nll[0] - 3.0
    assert min(res.val_nll) >= floor - 1e-9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    from tail_il.train import NumericalError

    w = P.init_weights(tiny_spec(), 0)
    w.params["head.b2"].data[:] = np.nan
    with pytest.raises((NumericalError, FloatingPointError)):
        bc_train(w, A.build_freeze_mask(w, "fft"), tiny_dataset(), FAST)


def test_warmup_longer_than_run():
    from tail_il.train import ScheduleError

    w = P.init_weights(tiny_spec(), 0)
    with pytest.raises(ScheduleError):
        bc_train(w, A.build_freeze_mask(w, "fft"), tiny_dataset(), dataclasses.replace(FAST, warmup_steps=10_000))


# --------------------------------------------------------------------------- curriculum


@pytest.fixture(scope="module")
def base():
    w = P.init_weights(tiny_spec(), 0)
    out, _ = C.pretrain(w, tiny_dataset(), FAST, CTX, ASPEC)
    return out


@pytest.mark.parametrize("strategy", ["tail-lora", "tail-bottleneck", "tail-prefix", "tail-roboadapter", "fpf"])
def test_frozen_base_strategies_have_zero_bwt(base, strategy):
    state, led = C.run_curriculum(base, _suites(), strategy, FAST, CTX, ASPEC)
    assert state.base.digest() == base.digest()
    assert all(s["base_digest_after"] == base.digest() for s in led.stages)
    assert led.bwt()[0] is None and led.bwt()[1] == 0.0
    assert set(state.bundles) == {"spatial", "goal"}


@pytest.mark.parametrize("strategy", ["fft", "er", "ewc"])
def test_full_tuning_strategies_change_the_base(base, strategy):
    state, led = C.run_curriculum(base, _suites(), strategy, FAST, CTX, ASPEC)
    assert led.stages[0]["base_digest_after"] != base.digest()
    assert led.bwt()[1] is not None
    first = led.stages[1]["success"][0]["suites"]
    assert set(first) == {"spatial", "goal"}
    if strategy == "ewc":
        assert state.ewc is not None and set(state.ewc.fisher) == set(base.params)


def test_stage_record_contents(base):
    _, led = C.run_curriculum(base, _suites(), "tail-lora", FAST, CTX, ASPEC)
    s = led.stage(2)
    assert [c["epoch"] for c in s["success"]] == [1, 2]
    assert s["fwt"] == compute_fwt([C.suite_mean({int(t): v for t, v in c["suites"]["goal"].items()})
                                    for c in s["success"]])[0]
    assert 0 < s["params"]["fraction"] < 1 and len(s["train_nll"]) == 2


def test_ledger_is_deterministic(base, tmp_path):
    runs = []
    for i in range(2):
        led = RunLedger(tmp_path / str(i), {"x": 1})
        C.run_curriculum(base, _suites(), "tail-lora", FAST, CTX, ASPEC, ledger=led)
        runs.append(((tmp_path / str(i) / "ledger.json").read_bytes(), (tmp_path / str(i) / "metrics.csv").read_bytes()))
    assert runs[0] == runs[1]


def test_circle_back(base):
    state, _ = C.run_curriculum(base, _suites(), "tail-lora", FAST, CTX, ASPEC)
    rep = C.circle_back(state, "spatial", FAST, CTX)
    assert rep["revisit"] == rep["initial"]
    with pytest.raises(LedgerError):
        C.circle_back(state, "object", FAST, CTX)
    fstate, _ = C.run_curriculum(base, _suites(), "fft", FAST, CTX, ASPEC)
    rep = C.circle_back(fstate, "spatial", FAST, CTX)
    assert 0.0 <= rep["revisit"] <= 1.0


def test_stage_cannot_repeat(base):
    state = C.CurriculumState.start(base, "tail-lora", ASPEC)
    C.adapt_stage("tail-lora", _suites()[0], state, FAST, CTX)
    with pytest.raises(C.StrategyError):
        C.adapt_stage("tail-lora", _suites()[0], state, FAST, CTX)


# --------------------------------------------------------------------------- ledger


def _rec(k, bwt=None, v=0.5):
    return {"stage": k, "suite_id": f"s{k}", "fwt": v, "bwt": bwt, "success": [{"suites": {f"s{k}": {"0": v}}}]}


def test_ledger_append_only_and_checks(tmp_path):
    led = RunLedger(tmp_path)
    led.append(_rec(1))
    with pytest.raises(LedgerError):
        led.append(_rec(3))
    with pytest.raises(LedgerError):
        RunLedger().append(_rec(1, bwt=0.0))
    with pytest.raises(LedgerError):
        led.append(_rec(2, v=1.5))
    led.append(_rec(2, bwt=-0.1), rows=[(2, 1, "s2/0", "eval", "success", 0.5)])
    stages = led.stages
    stages[0]["fwt"] = 9.0
    assert led.stage(1)["fwt"] == 0.5
    back = RunLedger.load(tmp_path)
    assert back.fwt() == [0.5, 0.5] and back.bwt() == [None, -0.1]
    assert back.rows() == [(2, 1, "s2/0", "eval", "success", 0.5)]
    with pytest.raises(LedgerError):
        back.find_suite("s9")
