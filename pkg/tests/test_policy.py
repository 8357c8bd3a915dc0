import math

import numpy as np
import pytest

from tail_il import policy as P
from tail_il import tensor as T
from tail_il.policy import Forward, GmmParams, PolicySpec
from tail_il.tensor import Tensor, grad_check

from _gradcheck import _problem, directional_errors
from _tiny import tiny_spec


def _gmm(logits, means, stds):
    return GmmParams(Tensor(np.asarray(logits, float)), Tensor(np.asarray(means, float)),
                     Tensor(np.asarray(stds, float)))


def _inputs(spec, B=2, Tn=3, seed=0):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(B, Tn, spec.perception_in_dim))), Tensor(rng.normal(size=(B, Tn, spec.state_dim))),
            Tensor(rng.normal(size=(B, spec.embed_dim))))


# --------------------------------------------------------------------------- spec


def test_spec_validation():
    with pytest.raises(P.SpecError):
        PolicySpec(embed_dim=10, decoder_heads=4)
    with pytest.raises(P.SpecError):
        PolicySpec(gmm_min_std=0.0)
    with pytest.raises(P.SpecError):
        PolicySpec(gmm_modes=0)
    with pytest.raises(P.SpecError):
        PolicySpec.from_dict({"embed_dim": 64, "colour": 1})


def test_every_param_in_exactly_one_group():
    w = P.init_weights(tiny_spec(), 0)
    assert set(w.params) == set(w.groups)
    assert set(w.groups.values()) <= set(P.GROUPS)


def test_digest_is_order_independent():
    w = P.init_weights(tiny_spec(), 0)
    shuffled = P.PolicyWeights(w.spec, dict(reversed(list(w.params.items()))), w.groups, w.frozen)
    assert shuffled.digest() == w.digest()


# --------------------------------------------------------------------------- FiLM


def test_film_identity_at_init():
    w = P.init_weights(tiny_spec(), 0)
    x = Tensor(np.random.default_rng(1).normal(size=(5, 16)))
    out = P.film_modulate(x, Tensor(np.random.default_rng(2).normal(size=16)), w)
    assert out.data.tobytes() == x.data.tobytes()


def test_film_forced_unit_gamma_doubles():
    w = P.init_weights(tiny_spec(), 0)
    last = w.spec.film_layers - 1
    b = np.zeros(32)
    b[:16] = 1.0
    w.params[f"fusion.b{last}"] = Tensor(b)
    x = Tensor(np.random.default_rng(1).normal(size=(5, 16)))
    out = P.film_modulate(x, Tensor(np.ones(16)), w)
    assert np.array_equal(out.data, 2 * x.data)


def test_film_matches_hand_rolled_generator():
    spec = tiny_spec()
    w = P.init_weights(spec, 0)
    rng = np.random.default_rng(3)
    for n in w.group_names("fusion"):
        w.params[n] = Tensor(rng.normal(size=w.params[n].shape))
    x = rng.normal(size=(4, 16))
    z = rng.normal(size=16)
    # independent recomputation of the generator: linear, gelu, linear
    h = z @ w.params["fusion.w0"].data + w.params["fusion.b0"].data
    h = 0.5 * h * (1 + np.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h ** 3)))
    h = h @ w.params["fusion.w1"].data + w.params["fusion.b1"].data
    gamma, beta = h[:16], h[16:]
    out = P.film_modulate(Tensor(x), Tensor(z), w).data
    assert np.allclose(out, (1 + gamma) * x + beta, atol=1e-12)


def test_film_rejects_wrong_embedding_width():
    w = P.init_weights(tiny_spec(), 0)
    with pytest.raises(T.ShapeError):
        P.film_modulate(Tensor(np.ones((2, 16))), Tensor(np.ones(7)), w)


def test_policy_ignores_task_embedding_at_init():
    spec = tiny_spec()
    w = P.init_weights(spec, 0)
    perc, st, _ = _inputs(spec)
    a = P.policy_forward_seq(w, perc, st, Tensor(np.ones((2, 16))))
    b = P.policy_forward_seq(w, perc, st, Tensor(-np.ones((2, 16))))
    for x, y in zip(a.numpy(), b.numpy()):
        assert x.tobytes() == y.tobytes()


# --------------------------------------------------------------------------- decoder


@pytest.mark.parametrize("layers", [1, 2])
def test_decoder_causality(layers):
    w = P.init_weights(tiny_spec(decoder_layers=layers), 0)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 16))
    y = x.copy()
    y[3] += rng.normal(size=16)

    def run(inp):
        h = Tensor(inp)
        for i in range(layers):
            h = P.decoder_block(h, w, i, mask=P.causal_mask(6))
        return h.data

    ox, oy = run(x), run(y)
    assert ox[:3].tobytes() == oy[:3].tobytes()
    assert not np.array_equal(ox[3:], oy[3:])


def test_policy_forward_is_causal_over_timesteps():
    spec = tiny_spec()
    w = P.init_weights(spec, 0)
    perc, st, emb = _inputs(spec, B=1, Tn=4)
    p2 = perc.data.copy()
    p2[0, 3] += 1.0
    a = P.policy_forward_seq(w, perc, st, emb).means.data
    b = P.policy_forward_seq(w, Tensor(p2), st, emb).means.data
    assert a[:, :3].tobytes() == b[:, :3].tobytes()


def test_decoder_block_mask_shape_error():
    w = P.init_weights(tiny_spec(), 0)
    with pytest.raises(T.ShapeError):
        P.decoder_block(Tensor(np.ones((3, 16))), w, 0, mask=np.zeros((2, 2), bool))


def test_single_token_attention_is_value_projection():
    spec = tiny_spec(decoder_heads=1)
    w = P.init_weights(spec, 0)
    fw = Forward(w)
    x = Tensor(np.random.default_rng(5).normal(size=(1, 1, 16)))
    out = P.attention(fw, x, "decoder.0", 1, True, 0).data
    p = {n: t.data for n, t in w.params.items()}
    v = x.data[0, 0] @ p["decoder.0.attn.wv"] + p["decoder.0.attn.bv"]
    expect = v @ p["decoder.0.attn.wo"] + p["decoder.0.attn.bo"]
    assert np.allclose(out[0, 0], expect, atol=1e-14)


def test_two_token_attention_by_hand():
    spec = PolicySpec(embed_dim=2, decoder_heads=1, perception_heads=1, perception_in_dim=4, perception_patches=2,
                      decoder_layers=1, film_hidden=2, head_hidden=2)
    w = P.init_weights(spec, 0)
    for n in ("wq", "wk", "wv", "wo"):
        w.params[f"decoder.0.attn.{n}"] = Tensor(np.eye(2))
        w.params[f"decoder.0.attn.b{n[1]}"] = Tensor(np.zeros(2))
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = P.attention(Forward(w), Tensor(x[None]), "decoder.0", 1, True, 0).data[0]
    # row 0 sees only itself; row 1 weighs scores [0, 1/sqrt(2)]
    s = 1 / math.sqrt(2)
    w1 = math.exp(s) / (1 + math.exp(s))
    assert np.allclose(out[0], [1.0, 0.0], atol=1e-15)
    assert np.allclose(out[1], [1 - w1, w1], atol=1e-15)


# --------------------------------------------------------------------------- forward pass


def test_policy_forward_deterministic_and_shapes():
    spec = tiny_spec()
    w = P.init_weights(spec, 0)
    rng = np.random.default_rng(6)
    hist = [(rng.normal(size=8), rng.normal(size=3)) for _ in range(3)]
    emb = rng.normal(size=16)
    a = P.policy_forward(w, hist, emb, train=True, dropout_key=(1, 2))
    b = P.policy_forward(w, hist, emb, train=True, dropout_key=(1, 2))
    for x, y in zip(a.numpy(), b.numpy()):
        assert x.tobytes() == y.tobytes()
    for h in (hist[:1], hist):
        g = P.policy_forward(w, h, emb)
        assert g.logits.shape == (3,) and g.means.shape == (3, 3) and g.stds.shape == (3, 3)
        assert abs(T.softmax(g.logits).data.sum() - 1) < 1e-12


def test_policy_forward_rejects_bad_histories():
    spec = tiny_spec()
    w = P.init_weights(spec, 0)
    obs = (np.zeros(8), np.zeros(3))
    with pytest.raises(T.ShapeError):
        P.policy_forward(w, [], np.zeros(16))
    with pytest.raises(T.ShapeError):
        P.policy_forward(w, [obs] * (spec.max_seq_len + 1), np.zeros(16))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_policy_forward_nan_is_hard_error():
    spec = tiny_spec()
    w = P.init_weights(spec, 0)
    with pytest.raises(FloatingPointError):
        P.policy_forward(w, [(np.full(8, np.nan), np.zeros(3))], np.zeros(16))


def test_std_clamp_on_random_latents():
    spec = tiny_spec()
    w = P.init_weights(spec, 0)
    rng = np.random.default_rng(7)
    w.params["head.w2"] = Tensor(rng.normal(size=w.params["head.w2"].shape) * 50)
    h = Tensor(rng.normal(size=(10_000, 16)) * 10)
    stds = P.gmm_head(Forward(w), h).stds.data
    assert (stds >= spec.gmm_min_std).all()
    assert stds.min() == spec.gmm_min_std  # saturated softplus lands exactly on the bound


# --------------------------------------------------------------------------- likelihood and selection


def test_nll_single_standard_mode():
    nll = P.gmm_nll(_gmm([0.0], [[0.3]], [[1.0]]), np.array([0.3]))
    assert abs(float(nll.data) - 0.5 * math.log(2 * math.pi)) < 1e-12
    assert abs(float(nll.data) - 0.9189385) < 1e-7


def test_nll_identical_modes_collapse():
    nll = P.gmm_nll(_gmm([0.0, 0.0], [[0.3], [0.3]], [[1.0], [1.0]]), np.array([0.3]))
    assert abs(float(nll.data) - 0.9189385332046727) < 1e-12


def test_nll_matches_brute_force_density():
    rng = np.random.default_rng(8)
    for _ in range(20):
        K, A = 4, 3
        logits, means = rng.normal(size=K), rng.normal(size=(K, A))
        stds = rng.uniform(0.2, 2.0, size=(K, A))
        a = rng.normal(size=A)
        w = np.exp(logits) / np.exp(logits).sum()
        dens = sum(w[k] * np.prod(np.exp(-0.5 * ((a - means[k]) / stds[k]) ** 2) / (stds[k] * math.sqrt(2 * math.pi)))
                   for k in range(K))
        nll = float(P.gmm_nll(_gmm(logits, means, stds), a).data)
        assert abs(nll + math.log(dens)) < 1e-10


def test_nll_rejects_non_finite_action():
    with pytest.raises(ValueError):
        P.gmm_nll(_gmm([0.0], [[0.0]], [[1.0]]), np.array([np.inf]))


def test_select_action_cases():
    assert P.select_action(_gmm([0.0], [[1.5, -2.0]], [[1.0, 1.0]])).tolist() == [1.5, -2.0]
    two = _gmm(np.log([0.7, 0.3]), [[1.0], [2.0]], [[1.0], [1.0]])
    assert P.select_action(two).tolist() == [1.0]
    spread = _gmm(np.log([0.5, 0.5]), [[1.0], [2.0]], [[1.0], [0.1]])
    assert P.select_action(spread).tolist() == [2.0]
    tie = _gmm([0.0, 0.0], [[1.0], [2.0]], [[1.0], [1.0]])
    assert P.select_action(tie).tolist() == [1.0]


def test_select_action_batched():
    g = _gmm([[0.0, 1.0], [1.0, 0.0]], [[[1.0], [2.0]], [[3.0], [4.0]]], np.ones((2, 2, 1)))
    assert P.select_action(g).tolist() == [[2.0], [3.0]]


# --------------------------------------------------------------------------- gradients


@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_grad_check(seed):
    errs = directional_errors(seed)
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-5, f"{worst}: {errs[worst]:.3e}"


def test_end_to_end_backward_reaches_every_tensor():
    w, (perc, st, emb, actions, mask), _ = _problem(0)
    for t in w.params.values():
        t.requires_grad = True
    with T.Tape() as tape:
        tape.backward(P.gmm_nll(P.policy_forward_seq(w, perc, st, emb), actions, mask))
    for n, t in w.params.items():
        g = tape.grad(t)
        assert g is not None and g.shape == t.shape, n


# --------------------------------------------------------------------------- persistence


def test_weights_roundtrip(tmp_path):
    w = P.init_weights(tiny_spec(), 0)
    P.save_weights(w, tmp_path / "ck", {"note": "x"})
    w2, meta = P.load_weights(tmp_path / "ck")
    assert w2.digest() == w.digest()
    assert w2.spec == w.spec
    assert meta["note"] == "x"
    for n in w.params:
        assert w2.params[n].data.tobytes() == w.params[n].data.tobytes()
