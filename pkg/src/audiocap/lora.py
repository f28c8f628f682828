"""Low-rank adaptation of linear projections and training-strategy wiring.

A LoraLinear keeps the frozen base projection and adds a scaled low-rank
residual (alpha/r) * B(Ax). B starts at zero so a freshly wrapped layer is
exactly the base layer. Strategies assign one of frozen / full_finetune /
lora to the encoder and decoder; adapters attach to the q and v
projections of every attention layer, and the bridge stays fully
trainable under every strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Linear, Module, MultiHeadAttention, Tensor


class RankTooLarge(ValueError):
    pass


class UnknownComponent(KeyError):
    pass


MODES = ("frozen", "full_finetune", "lora")


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0


@dataclass
class TrainStrategy:
    encoder: str = "full_finetune"
    decoder: str = "full_finetune"

    def __post_init__(self):
        for component, mode in self.modes().items():
            if mode not in MODES:
                raise ValueError(f"{component}: unknown mode {mode!r}")

    def modes(self) -> dict[str, str]:
        return {"encoder": self.encoder, "decoder": self.decoder}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainStrategy":
        unknown = set(d) - {"encoder", "decoder"}
        if unknown:
            raise UnknownComponent(f"unknown strategy component(s): {sorted(unknown)}")
        return cls(**d)


class LoraLinear(Module):
    def __init__(self, base: Linear, rank: int, alpha: float,
                 rng: np.random.Generator):
        d_out, d_in = base.weight.data.shape
        if rank < 1:
            raise ValueError("rank must be >= 1")
        if rank > min(d_in, d_out):
            raise RankTooLarge(f"rank {rank} exceeds min({d_in}, {d_out})")
        dtype = base.weight.data.dtype
        self.base = base
        self.lora_a = nn.parameter(rng.normal(0.0, 0.02, (rank, d_in)), dtype)
        self.lora_b = nn.parameter(np.zeros((d_out, rank)), dtype)
        self.rank = rank
        self.alpha = alpha
        self.enabled = True
        freeze(base)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x: Tensor) -> Tensor:
        y = self.base(x)
        if not self.enabled:
            return y
        low = nn.matmul(x, nn.transpose(self.lora_a, (1, 0)))
        residual = nn.matmul(low, nn.transpose(self.lora_b, (1, 0)))
        return y + residual * self.scaling

    def merge(self) -> Linear:
        """Fold the adapter into a plain layer: W' = W + (alpha/r) * B A."""
        w = self.base.weight.data
        if self.enabled:
            w = w + self.scaling * (self.lora_b.data @ self.lora_a.data)
        bias = getattr(self.base, "bias", None)
        return Linear.from_weights(
            w.copy(), None if bias is None else bias.data.copy())


def wrap_linear(layer: Linear, rank: int, alpha: float, seed) -> LoraLinear:
    return LoraLinear(layer, rank, alpha, nn.rng_from_seed(seed))


def iter_modules(root: Module):
    yield root
    for v in vars(root).values():
        if isinstance(v, Module):
            yield from iter_modules(v)
        elif isinstance(v, (list, tuple)):
            for item in v:
                if isinstance(item, Module):
                    yield from iter_modules(item)


def iter_attention_layers(root: Module):
    for m in iter_modules(root):
        if isinstance(m, MultiHeadAttention):
            yield m


def freeze(module: Module):
    for p in module.parameters():
        p.requires_grad = False


def unfreeze(module: Module):
    for p in module.parameters():
        p.requires_grad = True


def apply_mode(component: Module, mode: str, cfg: LoraConfig, seed) -> None:
    """Set requires_grad flags for one component, wrapping q/v under lora."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "frozen":
        freeze(component)
        return
    if mode == "full_finetune":
        unfreeze(component)
        return
    freeze(component)
    for i, attn in enumerate(iter_attention_layers(component)):
        for j, name in enumerate(("q", "v")):
            layer = getattr(attn, name)
            if isinstance(layer, LoraLinear):
                layer.lora_a.requires_grad = True
                layer.lora_b.requires_grad = True
            else:
                setattr(attn, name, LoraLinear(
                    layer, cfg.rank, cfg.alpha,
                    nn.rng_from_seed([seed, i, j])))


def apply_strategy(model, strategy: TrainStrategy, cfg: LoraConfig | None = None,
                   seed: int = 0) -> None:
    """Assign per-component trainability; bridge is always fully trainable."""
    cfg = cfg or LoraConfig()
    for component, mode in strategy.modes().items():
        module = getattr(model, component, None)
        if module is None:
            raise UnknownComponent(f"model has no component {component!r}")
        apply_mode(module, mode, cfg, [seed, component == "decoder"])
    unfreeze(model.bridge)


def trainable_parameters(model) -> dict[str, Tensor]:
    return {k: p for k, p in model.named_parameters().items() if p.requires_grad}


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())
