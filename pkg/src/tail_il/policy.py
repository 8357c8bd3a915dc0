"""Transformer imitation policy: frozen encoders, FiLM fusion, causal decoder, GMM head.

Token layout per timestep is ``[perception, state]``, interleaved
chronologically; the GMM head reads the decoder output at state tokens.
Adapter weights (LoRA pairs, bottleneck modules, prefix factors) are looked
up by host name from an optional :class:`~tail_il.adapters.AdapterBundle` or
from the base's own ``perception_adapter`` group.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

GROUPS = (
    "perception_encoder",
    "perception_adapter",
    "instruction_encoder",
    "state_encoder",
    "fusion",
    "decoder",
    "policy_head",
)
_LOG_2PI = math.log(2.0 * math.pi)
_MASK_VALUE = -1e9


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    embed_dim: int = 64
    decoder_layers: int = 2
    decoder_heads: int = 4
    perception_layers: int = 2
    perception_heads: int = 4
    perception_patches: int = 4
    perception_in_dim: int = 32
    max_seq_len: int = 8
    max_prefix_len: int = 32
    gmm_modes: int = 5
    gmm_min_std: float = 1e-4
    action_dim: int = 3
    state_dim: int = 3
    dropout: float = 0.15
    film_layers: int = 2
    film_hidden: int = 32
    head_hidden: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.decoder_heads:
            raise SpecError(f"embed_dim {self.embed_dim} not divisible by decoder_heads {self.decoder_heads}")
        if self.embed_dim % self.perception_heads:
            raise SpecError("embed_dim not divisible by perception_heads")
        if self.perception_in_dim % self.perception_patches:
            raise SpecError("perception_in_dim must split evenly into perception_patches")
        if not self.gmm_min_std > 0:
            raise SpecError("gmm_min_std must be positive")
        if self.gmm_modes < 1 or self.max_seq_len < 1:
            raise SpecError("gmm_modes and max_seq_len must be >= 1")
        if self.film_layers < 1:
            raise SpecError("film_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError("dropout must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicySpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown policy keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def head_out(self) -> int:
        return self.gmm_modes * (1 + 2 * self.action_dim)


# --------------------------------------------------------------------------- parameter layout


def _block_shapes(prefix: str, d: int, ratio: int) -> dict[str, tuple]:
    s = {}
    for ln in ("ln1", "ln2"):
        s[f"{prefix}.{ln}.g"] = (d,)
        s[f"{prefix}.{ln}.b"] = (d,)
    for w in ("wq", "wk", "wv", "wo"):
        s[f"{prefix}.attn.{w}"] = (d, d)
        s[f"{prefix}.attn.b{w[1]}"] = (d,)
    s[f"{prefix}.mlp.w1"] = (d, ratio * d)
    s[f"{prefix}.mlp.b1"] = (ratio * d,)
    s[f"{prefix}.mlp.w2"] = (ratio * d, d)
    s[f"{prefix}.mlp.b2"] = (d,)
    return s


def param_shapes(spec: PolicySpec) -> dict[str, tuple[tuple, str]]:
    """Name -> (shape, group) for every base parameter, without allocating."""
    d = spec.embed_dim
    out: dict[str, tuple[tuple, str]] = {}

    def put(group, shapes):
        for k, v in shapes.items():
            out[k] = (tuple(v), group)

    patch = spec.perception_in_dim // spec.perception_patches
    pe = {"perception.patch.w": (patch, d), "perception.patch.b": (d,),
          "perception.pos": (spec.perception_patches, d)}
    for i in range(spec.perception_layers):
        pe.update(_block_shapes(f"perception.{i}", d, spec.mlp_ratio))
    pe.update({"perception.ln_f.g": (d,), "perception.ln_f.b": (d,)})
    put("perception_encoder", pe)

    put("state_encoder", {"state.w1": (spec.state_dim, d), "state.b1": (d,),
                          "state.w2": (d, d), "state.b2": (d,)})

    fu = {}
    widths = [d] + [spec.film_hidden] * (spec.film_layers - 1) + [2 * d]
    for i in range(spec.film_layers):
        fu[f"fusion.w{i}"] = (widths[i], widths[i + 1])
        fu[f"fusion.b{i}"] = (widths[i + 1],)
    put("fusion", fu)

    de = {"decoder.pos": (2 * spec.max_seq_len, d)}
    for i in range(spec.decoder_layers):
        de.update(_block_shapes(f"decoder.{i}", d, spec.mlp_ratio))
    de.update({"decoder.ln_f.g": (d,), "decoder.ln_f.b": (d,)})
    put("decoder", de)

    put("policy_head", {"head.w1": (d, spec.head_hidden), "head.b1": (spec.head_hidden,),
                        "head.w2": (spec.head_hidden, spec.head_out), "head.b2": (spec.head_out,)})
    return out


def count_params(shapes: Iterable[tuple]) -> int:
    return int(sum(math.prod(s) for s in shapes))


# --------------------------------------------------------------------------- weights


@dataclass
class PolicyWeights:
    spec: PolicySpec
    params: dict[str, Tensor]
    groups: dict[str, str]
    frozen: dict[str, bool] = field(default_factory=dict)
    adapter_alpha: float = 1.0

    def group_names(self, group: str) -> list[str]:
        return [n for n, g in self.groups.items() if g == group]

    def digest(self, groups: Iterable[str] | None = None) -> str:
        from .checkpoint import digest_arrays

        names = self.params if groups is None else [n for n in self.params if self.groups[n] in set(groups)]
        return digest_arrays({n: self.params[n].data for n in names})

    def frozen_digest(self) -> str:
        return self.digest([g for g, f in self.frozen.items() if f])

    def copy(self) -> "PolicyWeights":
        return PolicyWeights(self.spec, {n: Tensor(t.data.copy(), name=n) for n, t in self.params.items()},
                             dict(self.groups), dict(self.frozen), self.adapter_alpha)

    def num_params(self, group: str | None = None) -> int:
        return count_params(t.shape for n, t in self.params.items() if group is None or self.groups[n] == group)


def init_weights(spec: PolicySpec, seed: int) -> PolicyWeights:
    """GPT-2 style init: N(0, 0.02^2) matrices, zero biases, unit LN gains.

    The FiLM generator's last layer is zero so fusion starts as identity.
    """
    rng = np.random.default_rng(seed)
    params, groups = {}, {}
    patch = spec.perception_in_dim // spec.perception_patches
    for name, (shape, group) in param_shapes(spec).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif leaf.startswith("b") or name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "perception.patch.w":
            arr = rng.normal(0.0, 1.0 / math.sqrt(patch), shape)
        elif name == f"fusion.w{spec.film_layers - 1}":
            arr = np.zeros(shape)
        elif name in ("state.w1",):
            arr = rng.normal(0.0, 1.0 / math.sqrt(spec.state_dim), shape)
        elif name in ("fusion.w0", "head.w1", "state.w2") or name.startswith("fusion.w"):
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        params[name] = Tensor(arr, name=name)
        groups[name] = group
    frozen = {g: False for g in GROUPS}
    frozen["perception_encoder"] = True
    frozen["instruction_encoder"] = True
    return PolicyWeights(spec, params, groups, frozen)


# --------------------------------------------------------------------------- GMM container


@dataclass
class GmmParams:
    """Mixture parameters; arrays carry leading batch/time dims."""

    logits: Tensor  # [..., K]
    means: Tensor  # [..., K, A]
    stds: Tensor  # [..., K, A]

    def last(self) -> "GmmParams":
        """Parameters at the final timestep (for [B, T, ...] inputs)."""
        t = self.logits.shape[1]
        return GmmParams(
            T.reshape(T.slice(self.logits, 1, t - 1, t), (self.logits.shape[0],) + self.logits.shape[2:]),
            T.reshape(T.slice(self.means, 1, t - 1, t), (self.means.shape[0],) + self.means.shape[2:]),
            T.reshape(T.slice(self.stds, 1, t - 1, t), (self.stds.shape[0],) + self.stds.shape[2:]),
        )

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.logits.data, self.means.data, self.stds.data


# --------------------------------------------------------------------------- forward machinery


class Forward:
    """Resolves parameters (base plus optional bundle) for one forward pass."""

    def __init__(self, weights: PolicyWeights, bundle=None, *, train: bool = False,
                 dropout_key: tuple[int, ...] = (0, 0)):
        self.spec = weights.spec
        self.weights = weights
        self.bundle = bundle
        self.train = train
        self.key = tuple(dropout_key)
        p = dict(weights.params)
        self.adapters: dict[str, Tensor] = {}
        for n, t in p.items():
            if weights.groups.get(n) == "perception_adapter":
                self.adapters[n] = t
        self.extra: dict[str, Tensor] = {}
        self.alpha = 1.0
        self.base_alpha = weights.adapter_alpha
        self.phi = "gelu"
        if bundle is not None:
            p.update(bundle.fusion_copy)
            p.update(bundle.head_copy)
            self.extra = bundle.weights
            self.alpha = bundle.spec.lora_alpha
            self.phi = bundle.spec.bottleneck_act
        self.p = p

    def drop(self, x: Tensor, *site: int) -> Tensor:
        if not self.train or self.spec.dropout <= 0:
            return x
        return T.dropout(x, self.spec.dropout, True, self.key + tuple(site))

    def linear(self, x: Tensor, w: str, b: str | None = None) -> Tensor:
        y = T.matmul(x, self.p[w])
        for store, alpha in ((self.adapters, self.base_alpha), (self.extra, self.alpha)):
            down = store.get(f"lora/{w}/down")
            if down is not None:
                y = T.add(y, T.scale(T.matmul(T.matmul(x, down), store[f"lora/{w}/up"]), alpha))
        if b is not None:
            y = T.add(y, self.p[b])
        return y

    def bottleneck(self, x: Tensor, site: str) -> Tensor:
        for store in (self.adapters, self.extra):
            down = store.get(f"bottleneck/{site}/down")
            if down is not None:
                x = bottleneck_apply(x, down, store[f"bottleneck/{site}/up"], self.phi)
        return x

    def ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.add(T.mul(T.layer_norm(x), self.p[prefix + ".g"]), self.p[prefix + ".b"])


def bottleneck_apply(x: Tensor, down: Tensor, up: Tensor, phi: str = "gelu") -> Tensor:
    act = T.tanh if phi == "tanh" else T.gelu
    return T.add(x, T.matmul(act(T.matmul(x, down)), up))


def attention(fw: Forward, x: Tensor, prefix: str, heads: int, causal: bool, site: int) -> Tensor:
    """Multi-head self-attention over x: [B, N, d]."""
    B, N, d = x.shape
    dh = d // heads

    def split(t):
        return T.transpose(T.reshape(t, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split(fw.linear(x, f"{prefix}.attn.wq", f"{prefix}.attn.bq"))
    k = split(fw.linear(x, f"{prefix}.attn.wk", f"{prefix}.attn.bk"))
    v = split(fw.linear(x, f"{prefix}.attn.wv", f"{prefix}.attn.bv"))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if causal:
        scores = T.masked_fill(scores, causal_mask(N), _MASK_VALUE)
    probs = fw.drop(T.softmax(scores, axis=-1), site, 0)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, N, d))
    return fw.linear(ctx, f"{prefix}.attn.wo", f"{prefix}.attn.bo")


def causal_mask(n: int) -> np.ndarray:
    """True above the diagonal: position t may not see positions > t."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def transformer_block(fw: Forward, x: Tensor, prefix: str, heads: int, causal: bool, site: int) -> Tensor:
    """Pre-norm block: x + attn(LN(x)), then + mlp(LN(.)); adapters hook sublayer outputs."""
    a = attention(fw, fw.ln(x, f"{prefix}.ln1"), prefix, heads, causal, site)
    a = fw.bottleneck(a, f"{prefix}.attn_out")
    x = T.add(x, fw.drop(a, site, 1))
    h = T.gelu(fw.linear(fw.ln(x, f"{prefix}.ln2"), f"{prefix}.mlp.w1", f"{prefix}.mlp.b1"))
    m = fw.linear(h, f"{prefix}.mlp.w2", f"{prefix}.mlp.b2")
    m = fw.bottleneck(m, f"{prefix}.mlp_out")
    return T.add(x, fw.drop(m, site, 2))


def decoder_block(x: Tensor, weights: PolicyWeights, layer: int, bundle=None, *,
                  mask: np.ndarray | None = None, train: bool = False) -> Tensor:
    """One causal decoder layer on x: [n, d] or [B, n, d]."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    n = x.shape[1]
    if mask is not None and np.asarray(mask).shape != (n, n):
        raise T.ShapeError(f"decoder_block: mask shape {np.asarray(mask).shape} != ({n}, {n})")
    fw = Forward(weights, bundle, train=train)
    y = transformer_block(fw, x, f"decoder.{layer}", weights.spec.decoder_heads, True, 100 + layer)
    return T.reshape(y, y.shape[1:]) if squeeze else y


# --------------------------------------------------------------------------- encoders and fusion


def encode_perception(fw: Forward, feats: Tensor) -> Tensor:
    """feats: [M, perception_in_dim] -> [M, d] via the frozen patch transformer."""
    spec = fw.spec
    M = feats.shape[0]
    P = spec.perception_patches
    patches = T.reshape(feats, (M, P, spec.perception_in_dim // P))
    x = T.add(fw.linear(patches, "perception.patch.w", "perception.patch.b"), fw.p["perception.pos"])
    for i in range(spec.perception_layers):
        x = transformer_block(fw, x, f"perception.{i}", spec.perception_heads, False, i)
    return fw.ln(T.mean(x, axis=1), "perception.ln_f")


def encode_state(fw: Forward, state: Tensor) -> Tensor:
    h = T.gelu(fw.linear(state, "state.w1", "state.b1"))
    return fw.linear(h, "state.w2", "state.b2")


def film_params(fw: Forward, task_emb: Tensor) -> tuple[Tensor, Tensor]:
    """task_emb [B, d] -> (gamma, beta) each [B, d]."""
    spec = fw.spec
    h = task_emb
    for i in range(spec.film_layers):
        h = fw.linear(h, f"fusion.w{i}", f"fusion.b{i}")
        if i < spec.film_layers - 1:
            h = T.gelu(h)
    d = spec.embed_dim
    return T.slice(h, -1, 0, d), T.slice(h, -1, d, 2 * d)


def film_apply(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """x' = (1 + gamma) * x + beta, with gamma/beta [B, d] applied to every row of x: [B, n, d]."""
    xt = T.transpose(x, (1, 0, 2))
    out = T.add(T.add(xt, T.mul(xt, gamma)), beta)
    return T.transpose(out, (1, 0, 2))


def film_modulate(x: Tensor, task_emb: Tensor, weights: PolicyWeights, bundle=None) -> Tensor:
    """Single-sequence FiLM: x [n, d], task_emb [d] -> [n, d]."""
    d = weights.spec.embed_dim
    if task_emb.shape != (d,):
        raise T.ShapeError(f"film_modulate: task_emb shape {task_emb.shape} != ({d},)")
    fw = Forward(weights, bundle)
    gamma, beta = film_params(fw, T.reshape(task_emb, (1, d)))
    out = film_apply(T.reshape(x, (1,) + x.shape), gamma, beta)
    return T.reshape(out, x.shape)


# --------------------------------------------------------------------------- policy


def policy_forward_seq(weights: PolicyWeights, perception: Tensor, state: Tensor, task_emb: Tensor,
                       bundle=None, *, train: bool = False, dropout_key: tuple[int, ...] = (0, 0)) -> GmmParams:
    """Batched forward over histories.

    perception [B, T, perception_in_dim], state [B, T, state_dim], task_emb [B, d].
    Returns GMM parameters at every timestep ([B, T, ...]); causality means
    position t only depends on observations up to t.
    """
    spec = weights.spec
    B, Tn = perception.shape[:2]
    if Tn > spec.max_seq_len:
        raise T.ShapeError(f"history length {Tn} exceeds max_seq_len {spec.max_seq_len}; truncate first")
    if Tn < 1:
        raise T.ShapeError("empty observation history")
    d = spec.embed_dim
    fw = Forward(weights, bundle, train=train, dropout_key=dropout_key)

    pe = encode_perception(fw, T.reshape(perception, (B * Tn, spec.perception_in_dim)))
    se = encode_state(fw, T.reshape(state, (B * Tn, spec.state_dim)))
    gamma, beta = film_params(fw, task_emb)
    pe = film_apply(T.reshape(pe, (B, Tn, d)), gamma, beta)
    se = film_apply(T.reshape(se, (B, Tn, d)), gamma, beta)

    tokens = T.reshape(T.concat([T.reshape(pe, (B, Tn, 1, d)), T.reshape(se, (B, Tn, 1, d))], axis=2),
                       (B, 2 * Tn, d))
    tokens = T.add(tokens, T.slice(fw.p["decoder.pos"], 0, 0, 2 * Tn))
    tokens = fw.drop(tokens, 99)

    m = 0
    prefix = prefix_tokens(fw)
    if prefix is not None:
        m = prefix.shape[0]
        if m > spec.max_prefix_len:
            raise T.ShapeError(f"prefix length {m} exceeds decoder capacity {spec.max_prefix_len}")
        if m:
            tokens = T.concat([T.add(Tensor(np.zeros((B, m, d))), prefix), tokens], axis=1)

    x = tokens
    for i in range(spec.decoder_layers):
        x = transformer_block(fw, x, f"decoder.{i}", spec.decoder_heads, True, 100 + i)
    if m:
        x = T.slice(x, 1, m, m + 2 * Tn)
    x = fw.ln(x, "decoder.ln_f")
    state_tok = T.reshape(T.slice(T.reshape(x, (B, Tn, 2, d)), 2, 1, 2), (B, Tn, d))
    return gmm_head(fw, state_tok)


def prefix_tokens(fw: Forward) -> Tensor | None:
    down = fw.extra.get("prefix/down")
    if down is None:
        return None
    return T.matmul(T.transpose(down, (1, 0)), fw.extra["prefix/up"])


def gmm_head(fw: Forward, h: Tensor) -> GmmParams:
    spec = fw.spec
    K, A = spec.gmm_modes, spec.action_dim
    lead = h.shape[:-1]
    z = T.gelu(fw.linear(h, "head.w1", "head.b1"))
    out = fw.linear(z, "head.w2", "head.b2")
    logits = T.slice(out, -1, 0, K)
    means = T.reshape(T.slice(out, -1, K, K + K * A), lead + (K, A))
    raw = T.reshape(T.slice(out, -1, K + K * A, K + 2 * K * A), lead + (K, A))
    stds = T.add(T.softplus(raw), Tensor(spec.gmm_min_std))
    return GmmParams(logits, means, stds)


def policy_forward(weights: PolicyWeights, history: list[tuple[np.ndarray, np.ndarray]], task_emb,
                   bundle=None, *, train: bool = False, dropout_key: tuple[int, ...] = (0, 0)) -> GmmParams:
    """GMM parameters for the latest step of one observation history.

    ``history`` is a list of (perception features, proprio state) pairs,
    oldest first, of length 1..max_seq_len.
    """
    if not history:
        raise T.ShapeError("empty observation history")
    if len(history) > weights.spec.max_seq_len:
        raise T.ShapeError(f"history length {len(history)} exceeds max_seq_len {weights.spec.max_seq_len}")
    perc = Tensor(np.stack([h[0] for h in history])[None])
    st = Tensor(np.stack([h[1] for h in history])[None])
    emb = task_emb if isinstance(task_emb, Tensor) else Tensor(np.asarray(task_emb)[None])
    if emb.ndim == 1:
        emb = T.reshape(emb, (1, emb.shape[0]))
    g = policy_forward_seq(weights, perc, st, emb, bundle, train=train, dropout_key=dropout_key).last()
    out = GmmParams(*(T.reshape(t, t.shape[1:]) for t in (g.logits, g.means, g.stds)))
    for t in (out.logits, out.means, out.stds):
        if not np.isfinite(t.data).all():
            raise FloatingPointError("non-finite value in policy output")
    return out


# --------------------------------------------------------------------------- likelihood and action selection


def _last_to_front(x: Tensor) -> Tensor:
    return T.transpose(x, (x.ndim - 1,) + tuple(range(x.ndim - 1)))


def _front_to_last(x: Tensor) -> Tensor:
    return T.transpose(x, tuple(range(1, x.ndim)) + (0,))


def _logsumexp(x: Tensor) -> Tensor:
    """log-sum-exp over the last axis, shifted by the (constant) max."""
    m = np.max(x.data, axis=-1, keepdims=True)
    s = T.log(T.sum(T.exp(T.sub(x, Tensor(np.broadcast_to(m, x.shape).copy()))), axis=-1))
    return T.add(s, Tensor(m[..., 0]))


def gmm_log_prob(params: GmmParams, action) -> Tensor:
    """log p(action) under the mixture; action broadcasts as [..., A]."""
    a = np.asarray(action.data if isinstance(action, Tensor) else action, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("non-finite action")
    lead = a.shape[:-1]
    A = a.shape[-1]
    a = Tensor(np.broadcast_to(a[..., None, :], params.means.shape).copy())
    z = T.div(T.sub(a, params.means), params.stds)
    comp = T.sum(T.sub(T.scale(T.mul(z, z), -0.5), T.log(params.stds)), axis=-1)
    comp = T.add(comp, Tensor(-0.5 * A * _LOG_2PI))
    logw = _front_to_last(T.sub(_last_to_front(params.logits), _logsumexp(params.logits)))
    return _logsumexp(T.add(logw, comp))


def gmm_nll(params: GmmParams, action, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood (scalar). ``mask`` selects valid positions."""
    lp = gmm_log_prob(params, action)
    if mask is None:
        return T.scale(T.mean(lp), -1.0) if lp.ndim else T.scale(lp, -1.0)
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.sum()
    if n == 0:
        raise ValueError("empty batch: no valid positions")
    return T.scale(T.sum(T.mul(lp, Tensor(mask))), -1.0 / n)


def select_action(params: GmmParams) -> np.ndarray:
    """Mean of the mode with the highest mixture density at its own mean.

    Score is w_k * prod_j (2 pi sigma_kj^2)^(-1/2); ties go to the lowest index.
    Works on single ([K], [K, A]) or batched ([B, K], [B, K, A]) parameters.
    """
    logits, means, stds = params.numpy()
    logw = logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
    score = logw - np.log(stds).sum(axis=-1)
    k = np.argmax(score, axis=-1)
    return np.take_along_axis(means, k[..., None, None], axis=-2)[..., 0, :]


# --------------------------------------------------------------------------- persistence


def save_weights(weights: PolicyWeights, path, meta: Mapping | None = None):
    from .checkpoint import write_arrays

    m = {"policy_spec": weights.spec.to_dict(), "frozen_groups": weights.frozen,
         "adapter_alpha": weights.adapter_alpha, "extra": dict(meta or {})}
    return write_arrays(path, {n: t.data for n, t in weights.params.items()}, groups=weights.groups,
                        frozen=weights.frozen, meta=m, kind="checkpoint")


def load_weights(path) -> tuple[PolicyWeights, dict]:
    from .checkpoint import CheckpointError, read_arrays

    arrays, manifest = read_arrays(path)
    if manifest.get("kind") != "checkpoint":
        raise CheckpointError(f"{path} is not a policy checkpoint")
    meta = manifest["meta"]
    try:
        spec = PolicySpec.from_dict(meta["policy_spec"])
    except (KeyError, TypeError, SpecError) as exc:
        raise CheckpointError(f"checkpoint {path} has an invalid spec echo: {exc}") from exc
    groups = {e["name"]: e["group"] for e in manifest["arrays"]}
    params = {n: Tensor(a, name=n) for n, a in arrays.items()}
    w = PolicyWeights(spec, params, groups, dict(meta.get("frozen_groups", {})), float(meta.get("adapter_alpha", 1.0)))
    return w, meta.get("extra", {})
