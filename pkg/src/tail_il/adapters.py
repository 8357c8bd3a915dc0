"""Parameter-efficient adapters: LoRA, bottleneck, RoboAdapter, prefix tokens.

An :class:`AdapterBundle` is the per-suite payload: adapter tensors keyed by
``<method>/<host site>/<down|up>``, plus private copies of the fusion module
and policy head. Bundles are trained against a frozen base and refuse to load
against any other base (checked by content digest).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, DigestMismatch, dir_size, read_arrays, write_arrays
from .policy import GROUPS, PolicySpec, PolicyWeights, bottleneck_apply, param_shapes
from .tensor import Tensor

METHODS = ("lora", "bottleneck", "prefix", "roboadapter")
STRATEGIES = ("tail", "fft", "fpf", "pretrain")
HOSTS = ("perception", "decoder")


class AdapterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    methods: tuple[str, ...] = ("lora",)
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = ("query", "value")
    bottleneck_size: int = 32
    bottleneck_act: str = "gelu"
    roboadapter_size: int = 64
    roboadapter_perception_layers: tuple[int, ...] | None = None
    roboadapter_decoder_layers: tuple[int, ...] | None = None
    prefix_len: int = 30
    prefix_rank: int = 16
    decoder_rank_multiplier: int = 2
    init_noise_std: float = 0.001
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        for k in ("roboadapter_perception_layers", "roboadapter_decoder_layers"):
            v = getattr(self, k)
            if v is not None:
                object.__setattr__(self, k, tuple(int(i) for i in v))
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise AdapterConfigError(f"unknown adapter methods {sorted(bad)}")
        if "bottleneck" in self.methods and "roboadapter" in self.methods:
            raise AdapterConfigError("bottleneck and roboadapter both insert after the feedforward; pick one")
        bad = set(self.lora_targets) - {"query", "value", "key", "output", "feedforward"}
        if bad:
            raise AdapterConfigError(f"unknown lora targets {sorted(bad)}")
        if self.lora_rank < 1 or self.bottleneck_size < 1 or self.roboadapter_size < 1 or self.prefix_rank < 1:
            raise AdapterConfigError("ranks and bottleneck sizes must be >= 1")
        if self.prefix_len < 0:
            raise AdapterConfigError("prefix_len must be >= 0")
        if self.decoder_rank_multiplier < 1:
            raise AdapterConfigError("decoder_rank_multiplier must be >= 1")
        if self.init_noise_std < 0:
            raise AdapterConfigError("init_noise_std must be >= 0")
        if self.bottleneck_act not in ("gelu", "tanh"):
            raise AdapterConfigError(f"unsupported bottleneck activation {self.bottleneck_act!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdapterSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise AdapterConfigError(f"unknown adapter keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def with_methods(self, *methods: str) -> "AdapterSpec":
        d = self.to_dict()
        d["methods"] = list(methods)
        return AdapterSpec.from_dict(d)


# --------------------------------------------------------------------------- standalone module math


def lora_forward(W: Tensor, h_in: Tensor, down: Tensor, up: Tensor, alpha: float) -> Tensor:
    """h_out = W^T h + alpha * up^T (down^T h) for W: [d, k], h: [d]."""
    if down.shape[1] != up.shape[0]:
        raise AdapterConfigError(f"lora rank mismatch: down {down.shape} vs up {up.shape}")
    if W.shape != (down.shape[0], up.shape[1]):
        raise AdapterConfigError(f"lora pair {down.shape}/{up.shape} does not fit W {W.shape}")
    base = T.matmul(T.transpose(W), h_in)
    delta = T.matmul(T.transpose(up), T.matmul(T.transpose(down), h_in))
    return T.add(base, T.scale(delta, alpha))


def lora_merged_forward(W: Tensor, h_in: Tensor, down: Tensor, up: Tensor, alpha: float) -> Tensor:
    """Same output through the merged weight (W + alpha * down @ up)^T h."""
    merged = T.add(W, T.scale(T.matmul(down, up), alpha))
    return T.matmul(T.transpose(merged), h_in)


def bottleneck_forward(base_out: Tensor, down: Tensor, up: Tensor, phi: str = "gelu") -> Tensor:
    """Residual bottleneck: base_out + up^T phi(down^T base_out)."""
    k = base_out.shape[-1]
    if down.shape[0] != k or up.shape[1] != k:
        raise AdapterConfigError(f"bottleneck pair {down.shape}/{up.shape} does not fit width {k}")
    if down.shape[1] > k:
        raise AdapterConfigError(f"bottleneck size {down.shape[1]} wider than host width {k}")
    return bottleneck_apply(base_out, down, up, phi)


def prefix_extend(seq: Tensor, down: Tensor | None, up: Tensor | None, capacity: int) -> tuple[Tensor, int]:
    """Prepend materialized prefix tokens p = down^T up to seq: [n, d].

    Returns the extended sequence and m; callers drop the first m outputs.
    """
    if down is None or down.shape[1] == 0:
        return seq, 0
    m = down.shape[1]
    if m + seq.shape[0] > capacity:
        raise AdapterConfigError(f"prefix length {m} + sequence {seq.shape[0]} exceeds capacity {capacity}")
    p = T.matmul(T.transpose(down), up)
    return T.concat([p, seq], axis=0), m


# --------------------------------------------------------------------------- insertion plan


def _layers(pspec: PolicySpec, host: str) -> int:
    return pspec.perception_layers if host == "perception" else pspec.decoder_layers


def _mult(aspec: AdapterSpec, host: str) -> int:
    return aspec.decoder_rank_multiplier if host == "decoder" else 1


def roboadapter_placement(aspec: AdapterSpec, pspec: PolicySpec, host: str) -> list[str]:
    """Sites (after the feedforward sublayer only) receiving a RoboAdapter module."""
    depth = _layers(pspec, host)
    mask = aspec.roboadapter_perception_layers if host == "perception" else aspec.roboadapter_decoder_layers
    layers = range(depth) if mask is None else mask
    for i in layers:
        if not 0 <= i < depth:
            raise AdapterConfigError(f"roboadapter layer {i} out of range for {host} depth {depth}")
    return [f"{host}.{i}.mlp_out" for i in sorted(set(layers))]


_TARGET_PARAMS = {"query": ["attn.wq"], "key": ["attn.wk"], "value": ["attn.wv"],
                  "output": ["attn.wo"], "feedforward": ["mlp.w1", "mlp.w2"]}


def adapter_shapes(aspec: AdapterSpec, pspec: PolicySpec, hosts: Iterable[str] = HOSTS) -> dict[str, tuple]:
    """Name -> shape for every adapter tensor implied by the spec."""
    base = {n: s for n, (s, _) in param_shapes(pspec).items()}
    d = pspec.embed_dim
    out: dict[str, tuple] = {}
    for host in hosts:
        mult = _mult(aspec, host)
        for i in range(_layers(pspec, host)):
            if "lora" in aspec.methods:
                r = aspec.lora_rank * mult
                for tgt in aspec.lora_targets:
                    for pname in _TARGET_PARAMS[tgt]:
                        w = f"{host}.{i}.{pname}"
                        din, dout = base[w]
                        if r > min(din, dout):
                            raise AdapterConfigError(f"lora rank {r} exceeds min dims of {w} {base[w]}")
                        out[f"lora/{w}/down"] = (din, r)
                        out[f"lora/{w}/up"] = (r, dout)
            if "bottleneck" in aspec.methods:
                r = aspec.bottleneck_size * mult
                if r > d:
                    raise AdapterConfigError(f"bottleneck size {r} wider than host width {d}")
                for site in ("attn_out", "mlp_out"):
                    out[f"bottleneck/{host}.{i}.{site}/down"] = (d, r)
                    out[f"bottleneck/{host}.{i}.{site}/up"] = (r, d)
        if "roboadapter" in aspec.methods:
            r = aspec.roboadapter_size * mult
            if r > d:
                raise AdapterConfigError(f"roboadapter size {r} wider than host width {d}")
            for site in roboadapter_placement(aspec, pspec, host):
                out[f"bottleneck/{site}/down"] = (d, r)
                out[f"bottleneck/{site}/up"] = (r, d)
        if "prefix" in aspec.methods and host == "decoder" and aspec.prefix_len > 0:
            r = aspec.prefix_rank * mult
            if aspec.prefix_len > pspec.max_prefix_len:
                raise AdapterConfigError(
                    f"prefix length {aspec.prefix_len} exceeds decoder capacity {pspec.max_prefix_len}")
            out["prefix/down"] = (r, aspec.prefix_len)
            out["prefix/up"] = (r, d)
    return out


# --------------------------------------------------------------------------- bundles


@dataclass
class AdapterBundle:
    suite_id: str
    weights: dict[str, Tensor]
    fusion_copy: dict[str, Tensor]
    head_copy: dict[str, Tensor]
    spec: AdapterSpec
    base_digest: str
    meta: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        return {**self.weights, **self.fusion_copy, **self.head_copy}

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors().values()))

    def digest(self) -> str:
        from .checkpoint import digest_arrays

        return digest_arrays({n: t.data for n, t in self.tensors().items()})


def init_adapter(aspec: AdapterSpec, base: PolicyWeights, *, prev: AdapterBundle | None = None,
                 seed: int = 0, suite_id: str = "") -> AdapterBundle:
    """Fresh bundle (zero-init up projections) or ``prev`` plus N(0, noise^2) jitter."""
    base_digest = base.digest()
    rng = np.random.default_rng(seed)
    if prev is not None:
        if prev.spec != aspec:
            raise AdapterConfigError("previous bundle was built with a different adapter spec")
        if prev.base_digest != base_digest:
            raise DigestMismatch("previous bundle was trained against a different base")
        sigma = aspec.init_noise_std
        weights = {}
        for n in sorted(prev.weights):
            arr = prev.weights[n].data
            weights[n] = Tensor(arr + rng.normal(0.0, sigma, arr.shape) if sigma > 0 else arr.copy(), name=n)
        fusion = {n: Tensor(t.data.copy(), name=n) for n, t in prev.fusion_copy.items()}
        head = {n: Tensor(t.data.copy(), name=n) for n, t in prev.head_copy.items()}
    else:
        weights = {}
        for n, shape in sorted(adapter_shapes(aspec, base.spec).items()):
            if n.endswith("/up") and not n.startswith("prefix/"):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, aspec.init_std, shape)
            weights[n] = Tensor(arr, name=n)
        fusion = {n: Tensor(base.params[n].data.copy(), name=n) for n in base.group_names("fusion")}
        head = {n: Tensor(base.params[n].data.copy(), name=n) for n in base.group_names("policy_head")}
    return AdapterBundle(suite_id, weights, fusion, head, aspec, base_digest)


def fpf_bundle(base: PolicyWeights, suite_id: str = "", prev: AdapterBundle | None = None) -> AdapterBundle:
    """Adapter-free bundle carrying only fusion/head copies (frozen-feature baseline)."""
    src_f = prev.fusion_copy if prev else {n: base.params[n] for n in base.group_names("fusion")}
    src_h = prev.head_copy if prev else {n: base.params[n] for n in base.group_names("policy_head")}
    return AdapterBundle(suite_id, {},
                         {n: Tensor(t.data.copy(), name=n) for n, t in src_f.items()},
                         {n: Tensor(t.data.copy(), name=n) for n, t in src_h.items()},
                         AdapterSpec(methods=()), base.digest())


def attach_encoder_adapters(weights: PolicyWeights, aspec: AdapterSpec, seed: int = 0) -> PolicyWeights:
    """Add zero-init LoRA pairs on the frozen perception encoder as base group ``perception_adapter``.

    Used for pretraining: the encoder stays frozen while these pairs learn.
    """
    spec = AdapterSpec(methods=("lora",), lora_rank=aspec.lora_rank, lora_alpha=aspec.lora_alpha,
                       lora_targets=aspec.lora_targets)
    rng = np.random.default_rng(seed)
    for n, shape in sorted(adapter_shapes(spec, weights.spec, hosts=("perception",)).items()):
        arr = np.zeros(shape) if n.endswith("/up") else rng.normal(0.0, aspec.init_std, shape)
        weights.params[n] = Tensor(arr, name=n)
        weights.groups[n] = "perception_adapter"
    weights.adapter_alpha = float(aspec.lora_alpha)
    return weights


# --------------------------------------------------------------------------- freeze masks and accounting


@dataclass
class FreezeMask:
    strategy: str
    base: dict[str, bool]
    bundle: dict[str, bool]

    def trainable_base(self) -> list[str]:
        return [n for n, t in self.base.items() if t]

    def trainable_bundle(self) -> list[str]:
        return [n for n, t in self.bundle.items() if t]


def build_freeze_mask(weights, strategy: str, bundle=None) -> FreezeMask:
    """Per-parameter trainable flags for base and bundle tensors.

    ``weights`` may be a PolicyWeights or a name -> (shape, group) map;
    ``bundle`` may be an AdapterBundle or a name -> shape map of adapter
    tensors (fusion/head copies are implied for tail/fpf).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    groups = weights.groups if isinstance(weights, PolicyWeights) else {n: g for n, (_, g) in weights.items()}
    if strategy == "fft":
        return FreezeMask(strategy, {n: True for n in groups}, {})
    if strategy == "pretrain":
        frozen = {"perception_encoder", "instruction_encoder"}
        return FreezeMask(strategy, {n: g not in frozen for n, g in groups.items()}, {})
    base = {n: False for n in groups}
    names: list[str] = []
    if bundle is not None:
        names = list(bundle.tensors()) if isinstance(bundle, AdapterBundle) else list(bundle)
    if strategy == "fpf":
        names = [n for n in names if not _is_adapter(n)]
    if not any(not _is_adapter(n) for n in names):
        names += [n for n, g in groups.items() if g in ("fusion", "policy_head")]
    return FreezeMask(strategy, base, {n: True for n in names})


def _is_adapter(name: str) -> bool:
    return "/" in name


def count_trainable(weights, mask: FreezeMask, bundle=None) -> dict:
    """Exact parameter counts per group, adapter totals, and trainable fraction.

    The fraction is trainable parameters over the base parameter count (the
    number full fine-tuning would train).
    """
    if isinstance(weights, PolicyWeights):
        shapes = {n: (t.shape, weights.groups[n]) for n, t in weights.params.items()}
    else:
        shapes = dict(weights)
    if isinstance(bundle, AdapterBundle):
        bshapes = {n: t.shape for n, t in bundle.tensors().items()}
    else:
        bshapes = dict(bundle or {})
    for n in mask.bundle:
        if n not in bshapes and n in shapes:
            bshapes[n] = shapes[n][0]
    per_group: dict[str, dict[str, int]] = {g: {"total": 0, "trainable": 0} for g in GROUPS}
    for n, (shape, g) in shapes.items():
        k = math.prod(shape)
        per_group.setdefault(g, {"total": 0, "trainable": 0})
        per_group[g]["total"] += k
        if mask.base.get(n, False):
            per_group[g]["trainable"] += k
    adapters = sum(math.prod(s) for n, s in bshapes.items() if _is_adapter(n))
    copies = sum(math.prod(s) for n, s in bshapes.items() if not _is_adapter(n) and mask.bundle.get(n, False))
    adapter_trainable = sum(math.prod(s) for n, s in bshapes.items() if _is_adapter(n) and mask.bundle.get(n, False))
    total = sum(v["total"] for v in per_group.values())
    trainable = sum(v["trainable"] for v in per_group.values()) + adapter_trainable + copies
    by_host = {h: sum(math.prod(s) for n, s in bshapes.items() if _is_adapter(n) and _host_of(n) == h)
               for h in HOSTS}
    return {"groups": per_group, "adapter_params": int(adapters), "adapter_by_host": by_host,
            "head_fusion_copies": int(copies), "total": int(total), "trainable": int(trainable),
            "fraction": trainable / total if total else 0.0}


def _host_of(name: str) -> str:
    site = name.split("/")[1]
    return site.split(".")[0] if "." in site else "decoder"


def shape_report(pspec: PolicySpec, aspec: AdapterSpec | None, strategy: str) -> dict:
    """count_trainable on shapes alone (no allocation); handy at paper scale."""
    shapes = param_shapes(pspec)
    bshapes = {}
    if strategy == "tail":
        bshapes = adapter_shapes(aspec, pspec)
    mask = build_freeze_mask(shapes, strategy, bshapes if strategy in ("tail", "fpf") else None)
    return count_trainable(shapes, mask, bshapes)


# --------------------------------------------------------------------------- persistence


def save_bundle(bundle: AdapterBundle, path, policy_spec: PolicySpec | None = None) -> Path:
    arrays = {n: t.data for n, t in bundle.tensors().items()}
    groups = {n: ("adapter" if _is_adapter(n) else "fusion" if n in bundle.fusion_copy else "policy_head")
              for n in arrays}
    meta = {"suite_id": bundle.suite_id, "spec": bundle.spec.to_dict(), "base_digest": bundle.base_digest,
            "extra": bundle.meta}
    if policy_spec is not None:
        meta["policy_spec"] = policy_spec.to_dict()
    return write_arrays(path, arrays, groups=groups, meta=meta, kind="bundle")


def load_bundle(path, base_digest: str | None) -> AdapterBundle:
    arrays, manifest = read_arrays(path)
    if manifest.get("kind") != "bundle":
        raise CheckpointError(f"{path} is not an adapter bundle")
    meta = manifest["meta"]
    if base_digest is not None and meta.get("base_digest") != base_digest:
        raise DigestMismatch(f"bundle {path} was trained against base {meta.get('base_digest', '')[:12]}, "
                             f"current base is {base_digest[:12]}")
    try:
        spec = AdapterSpec.from_dict(meta["spec"])
    except (KeyError, TypeError, AdapterConfigError) as exc:
        raise CheckpointError(f"bundle {path} has an invalid spec echo: {exc}") from exc
    groups = {e["name"]: e["group"] for e in manifest["arrays"]}
    pick = lambda grp: {n: Tensor(a, name=n) for n, a in arrays.items() if groups[n] == grp}  # noqa: E731
    return AdapterBundle(meta["suite_id"], pick("adapter"), pick("fusion"), pick("policy_head"),
                         spec, meta["base_digest"], meta.get("extra", {}))


def bundle_size(path) -> int:
    return dir_size(path)
