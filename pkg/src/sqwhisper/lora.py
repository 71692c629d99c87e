"""Low-rank side paths on attention projections, with a freeze policy and
trainable-parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .nn import Linear, Module, MultiHeadAttention, Parameter, _init

PROJECTIONS = ("query", "key", "value", "out")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 16
    targets: tuple[str, ...] = PROJECTIONS
    scope: str = "both"  # encoder | decoder | both

    def __post_init__(self):
        if self.scope not in ("encoder", "decoder", "both"):
            raise ValueError(f"unknown LoRA scope {self.scope!r}")
        bad = set(self.targets) - set(PROJECTIONS)
        if bad:
            raise ValueError(f"unknown projections {sorted(bad)}")


class LoRALinear(Module):
    """h_out = w(h_in) + w_b(w_a(h_in)); ``w`` frozen, ``w_b`` starts at zero.

    No alpha/rank scaling factor is applied.
    """

    def __init__(self, base: Linear, rank: int, rng=None, std: float = 0.02):
        if not 1 <= rank < min(base.d_in, base.d_out):
            raise ValueError(f"rank {rank} must satisfy 1 <= R < min({base.d_in}, {base.d_out})")
        dtype = base.weight.dtype
        rng = rng if rng is not None else np.random.default_rng(0)
        self.base = base
        for p in base.parameters():
            p.frozen = True
        self.lora_a = Parameter(_init((base.d_in, rank), rng, std, dtype))
        self.lora_b = Parameter(_init((rank, base.d_out), None, 0.0, dtype, fill=0.0))
        self.rank = rank
        self.d_in, self.d_out = base.d_in, base.d_out

    def forward(self, x: Tensor) -> Tensor:
        return self.base(x) + (x @ self.lora_a) @ self.lora_b

    def merged(self) -> Linear:
        """Fold the side path into a single plain projection."""
        lin = Linear(self.d_in, self.d_out, std=0.0, bias=self.base.bias is not None,
                     dtype=self.base.weight.dtype)
        lin.weight = Parameter(self.base.weight.data + self.lora_a.data @ self.lora_b.data)
        if self.base.bias is not None:
            lin.bias = Parameter(self.base.bias.data.copy())
        return lin


def wrap_linear(base: Linear, rank: int, rng=None) -> LoRALinear:
    return LoRALinear(base, rank, rng)


def _attention_modules(backbone, scope: str):
    if scope in ("encoder", "both"):
        for blk in backbone.encoder.blocks:
            yield blk.attn
    if scope in ("decoder", "both"):
        for blk in backbone.decoder.blocks:
            yield blk.attn
            yield blk.cross_attn


def apply_lora(backbone: Module, cfg: LoRAConfig, rng=None) -> list[LoRALinear]:
    """Freeze every backbone weight and wrap the selected attention projections.

    Modules living outside ``backbone`` (adapters, SQ-Former) are untouched and
    stay trainable.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in backbone.parameters():
        p.frozen = True
    wrapped = []
    for attn in _attention_modules(backbone, cfg.scope):
        assert isinstance(attn, MultiHeadAttention)
        for name in cfg.targets:
            proj = getattr(attn, name)
            if isinstance(proj, LoRALinear):
                continue
            lora = LoRALinear(proj, cfg.rank, rng)
            setattr(attn, name, lora)
            wrapped.append(lora)
    return wrapped


def merge_lora(backbone: Module) -> None:
    """Replace every LoRALinear under ``backbone`` by its folded projection."""
    for _, mod in backbone.named_modules():
        if isinstance(mod, MultiHeadAttention):
            for name in PROJECTIONS:
                proj = getattr(mod, name)
                if isinstance(proj, LoRALinear):
                    setattr(mod, name, proj.merged())


def lora_param_count(d_in: int, d_out: int, rank: int) -> int:
    return rank * (d_in + d_out)


def component_of(name: str) -> str:
    if "lora_a" in name or "lora_b" in name:
        return "lora"
    if name.startswith("sqformer."):
        return "sqformer"
    if name.startswith("adapter."):
        return "adapter"
    return "backbone"


@dataclass
class ParamRow:
    name: str
    count: int
    frozen: bool
    component: str


def trainable_param_report(model: Module) -> dict:
    """Per-parameter rows plus trainable/total counts per component."""
    rows = [ParamRow(name, int(np.prod(p.shape)), bool(p.frozen), component_of(name))
            for name, p in model.named_parameters()]
    totals: dict[str, dict[str, int]] = {}
    for r in rows:
        t = totals.setdefault(r.component, {"trainable": 0, "total": 0})
        t["total"] += r.count
        if not r.frozen:
            t["trainable"] += r.count
    return {
        "rows": rows,
        "components": totals,
        "trainable": sum(r.count for r in rows if not r.frozen),
        "total": sum(r.count for r in rows),
    }


def format_report(report: dict) -> str:
    lines = [f"{'component':<10} {'trainable':>12} {'total':>12}"]
    for comp, t in sorted(report["components"].items()):
        lines.append(f"{comp:<10} {t['trainable']:>12,} {t['total']:>12,}")
    lines.append(f"{'all':<10} {report['trainable']:>12,} {report['total']:>12,}")
    return "\n".join(lines)
