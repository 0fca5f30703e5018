"""Low-rank adapters ``W' = W + alpha * A @ B`` on frozen weight matrices."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError

if TYPE_CHECKING:
    from .refnet import ModelState

POLICIES = {
    "pointwise_convs": "pointwise",
    "attention_projections": "attention",
}


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    alpha: float
    rank: int
    target_id: str

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.B.shape[1]

    @property
    def num_params(self) -> int:
        return self.rank * (self.m + self.n)

    def delta(self) -> np.ndarray:
        return self.alpha * (self.A.data @ self.B.data)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{self.target_id}.lora_A", self.A), (f"{self.target_id}.lora_B", self.B)]


@dataclass
class AdapterSet:
    policy: str
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters.values())

    def get(self, target_id: str) -> LoraAdapter | None:
        return self.adapters.get(target_id)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [p for a in self.adapters.values() for p in a.parameters()]


def new_adapter(target_id: str, m: int, n: int, rank: int, alpha: float,
                rng: np.random.Generator) -> LoraAdapter:
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    if rank > min(m, n):
        raise ConfigError(f"rank {rank} exceeds min(m, n) = {min(m, n)} for layer {target_id!r}")
    if 2 * rank > min(m, n):
        warnings.warn(f"rank {rank} is not small relative to {m}x{n} layer {target_id!r}",
                      stacklevel=3)
    a = rng.uniform(-1.0, 1.0, size=(m, rank)) / np.sqrt(rank)
    return LoraAdapter(
        A=Tensor(a, requires_grad=True, name=f"{target_id}.lora_A"),
        B=Tensor(np.zeros((rank, n)), requires_grad=True, name=f"{target_id}.lora_B"),
        alpha=float(alpha),
        rank=rank,
        target_id=target_id,
    )


def attach(model: "ModelState", policy: str, rank: int, alpha: float = 1.0,
           seed: int = 0) -> AdapterSet:
    """Attach a fresh zero-delta adapter to every layer the policy selects.

    Base weights are switched to ``requires_grad=False``; the returned set is
    also stored on ``model.adapters``.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown targeting policy {policy!r}")
    targets = model.layers_of_kind(POLICIES[policy])
    if not targets:
        raise ConfigError(f"policy {policy!r} matches no layer of the {model.config.variant} encoder")
    rng = np.random.default_rng(seed)
    aset = AdapterSet(policy)
    for name in targets:
        m, n = model.params[f"{name}.weight"].shape
        aset.adapters[name] = new_adapter(name, m, n, rank, alpha, rng)
    model.freeze_all()
    model.adapters = aset
    return aset


def detach_adapters(model: "ModelState") -> None:
    model.adapters = None


def adapted_forward(x, W: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """``x @ W + alpha * ((x @ A) @ B)`` without forming ``W'``."""
    x = ag.as_tensor(x)
    base = ag.matmul(x, W)
    if adapter is None:
        return base
    if adapter.A.shape[0] != W.shape[0] or adapter.B.shape[1] != W.shape[1]:
        raise DimensionError(
            f"adapter {adapter.A.shape}x{adapter.B.shape} does not fit weight {W.shape}")
    low = ag.matmul(ag.matmul(x, adapter.A), adapter.B)
    if adapter.alpha != 1.0:
        low = low * adapter.alpha
    return base + low


def merge(W, adapter: LoraAdapter) -> Tensor:
    W = ag.as_tensor(W)
    if W.shape != (adapter.m, adapter.n):
        raise DimensionError(f"adapter for {adapter.m}x{adapter.n} cannot merge into {W.shape}")
    return Tensor(W.data + adapter.delta())


def unmerge(W_merged, adapter: LoraAdapter) -> Tensor:
    W_merged = ag.as_tensor(W_merged)
    return Tensor(W_merged.data - adapter.delta())


def count_trainable(adapters: AdapterSet) -> int:
    return sum(a.num_params for a in adapters)


def trainable_percentage(adapters: AdapterSet, model: "ModelState") -> float:
    return 100.0 * count_trainable(adapters) / model.num_parameters()


def save_adapters(adapters: AdapterSet, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"policy": adapters.policy, "adapters": []}
    for a in adapters:
        ag.save_tensor(d / f"{a.target_id}.A.tapt", a.A)
        ag.save_tensor(d / f"{a.target_id}.B.tapt", a.B)
        manifest["adapters"].append(
            {"target_id": a.target_id, "m": a.m, "n": a.n, "r": a.rank, "alpha": a.alpha})
    (d / "adapters.json").write_text(json.dumps(manifest, indent=2))


def load_adapters(directory: str | Path) -> AdapterSet:
    d = Path(directory)
    manifest = json.loads((d / "adapters.json").read_text())
    aset = AdapterSet(manifest["policy"])
    for rec in manifest["adapters"]:
        tid = rec["target_id"]
        A = ag.load_tensor(d / f"{tid}.A.tapt")
        B = ag.load_tensor(d / f"{tid}.B.tapt")
        if A.shape != (rec["m"], rec["r"]) or B.shape != (rec["r"], rec["n"]):
            raise DimensionError(f"adapter {tid!r} tensors disagree with manifest")
        aset.adapters[tid] = LoraAdapter(
            Tensor(A, requires_grad=True), Tensor(B, requires_grad=True),
            rec["alpha"], rec["r"], tid)
    return aset
