"""Independent closed-form parameter counts for adapter specs."""

import numpy as np

from tail_il import policy as P
from tail_il.adapters import AdapterSpec


def closed_form(aspec: AdapterSpec, ps: P.PolicySpec) -> int:
    d, f = ps.embed_dim, ps.mlp_ratio * ps.embed_dim
    dims = {"query": [(d, d)], "key": [(d, d)], "value": [(d, d)], "output": [(d, d)],
            "feedforward": [(d, f), (f, d)]}
    total = 0
    for host, depth in (("perception", ps.perception_layers), ("decoder", ps.decoder_layers)):
        mult = aspec.decoder_rank_multiplier if host == "decoder" else 1
        if "lora" in aspec.methods:
            r = aspec.lora_rank * mult
            total += depth * sum(r * (a + b) for t in aspec.lora_targets for a, b in dims[t])
        if "bottleneck" in aspec.methods:
            total += depth * 2 * (2 * d * aspec.bottleneck_size * mult)
        if "roboadapter" in aspec.methods:
            mask = aspec.roboadapter_perception_layers if host == "perception" else aspec.roboadapter_decoder_layers
            n = depth if mask is None else len(mask)
            total += n * 2 * d * aspec.roboadapter_size * mult
        if "prefix" in aspec.methods and host == "decoder" and aspec.prefix_len > 0:
            r = aspec.prefix_rank * mult
            total += r * aspec.prefix_len + r * d
    return total


def random_specs(n: int = 50, seed: int = 7):
    """(PolicySpec, AdapterSpec) pairs covering every method, target, and multiplier."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        heads = int(rng.choice([1, 2, 4]))
        ps = P.PolicySpec(embed_dim=heads * int(rng.integers(4, 12)), decoder_layers=int(rng.integers(1, 4)),
                          decoder_heads=heads, perception_layers=int(rng.integers(1, 4)), perception_heads=heads,
                          perception_in_dim=8, perception_patches=2, max_prefix_len=40,
                          mlp_ratio=int(rng.integers(1, 5)))
        d = ps.embed_dim
        mult = int(rng.integers(1, 3))
        methods = [m for m in ("lora", "prefix") if rng.random() < 0.6]
        methods.append(str(rng.choice(["bottleneck", "roboadapter"])))
        depth_p = ps.perception_layers
        targets = rng.choice(["query", "key", "value", "output", "feedforward"], size=int(rng.integers(1, 4)),
                             replace=False)
        mask = rng.choice(depth_p, size=int(rng.integers(0, depth_p + 1)), replace=False)
        aspec = AdapterSpec(
            methods=tuple(methods), lora_rank=int(rng.integers(1, d // mult + 1)),
            lora_targets=tuple(str(t) for t in targets),
            bottleneck_size=int(rng.integers(1, d // mult + 1)), roboadapter_size=int(rng.integers(1, d // mult + 1)),
            roboadapter_perception_layers=tuple(sorted(int(i) for i in mask)),
            prefix_len=int(rng.integers(0, 40)), prefix_rank=int(rng.integers(1, 8)), decoder_rank_multiplier=mult)
        out.append((ps, aspec))
    return out
