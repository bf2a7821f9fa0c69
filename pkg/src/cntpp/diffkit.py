"""Numeric substrate: small MLPs, gradient reversal, Adam, checkpoints.

Reverse-mode differentiation is delegated to torch autograd in float64.
Everything here is deliberately static: fixed-depth feed-forward stacks with
an optional positive-weight (softplus reparameterised) mode, plus forward
tangent propagation so that a network's derivative with respect to one
scalar input is available analytically.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

torch.set_default_dtype(torch.float64)

CHECKPOINT_FORMAT = "cntpp-checkpoint/1"

ACTIVATIONS = ("tanh", "softplus", "identity")


def _activate(name: str, z: torch.Tensor) -> torch.Tensor:
    if name == "tanh":
        return torch.tanh(z)
    if name == "softplus":
        return F.softplus(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activate_with_slope(name: str, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if name == "tanh":
        a = torch.tanh(z)
        return a, 1.0 - a * a
    if name == "softplus":
        return F.softplus(z), torch.sigmoid(z)
    if name == "identity":
        return z, torch.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


def mlp_forward(
    weights: Sequence[tuple[torch.Tensor, torch.Tensor]],
    x: torch.Tensor,
    activations: Sequence[str],
    positive: bool = False,
) -> torch.Tensor:
    """Affine/activation stack; ``weights[i] = (W, b)`` with ``W`` of shape (out, in).

    With ``positive=True`` every stored weight passes through softplus first.
    """
    if len(weights) != len(activations):
        raise ValueError("need one activation per layer")
    for (w, b), act in zip(weights, activations):
        if x.shape[-1] != w.shape[1]:
            raise ValueError(f"shape mismatch: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
        if positive:
            w = F.softplus(w)
        x = _activate(act, x @ w.T + b)
    return x


class MLP(nn.Module):
    """Feed-forward stack with tanh hidden units by default.

    Args:
        sizes: layer widths including input and output.
        hidden: activation on hidden layers.
        out: activation on the output layer.
        positive: softplus-reparameterise all weights (monotone network).
        positive_inputs: input columns whose first-layer weights are kept
            positive; implies ``positive`` for every later layer, so the output
            is nondecreasing in those inputs.
        dropout: dropout rate on hidden activations (training mode only).
        generator: torch generator for initialisation.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        hidden: str = "tanh",
        out: str = "identity",
        positive: bool = False,
        positive_inputs: Optional[Sequence[int]] = None,
        dropout: float = 0.0,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        for a in (hidden, out):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.acts = [hidden] * (len(sizes) - 2) + [out]
        self.positive = positive or positive_inputs is not None
        self.dropout = dropout
        mask = torch.zeros(self.sizes[0], dtype=torch.bool)
        if positive or positive_inputs is None:
            mask[:] = positive
        else:
            mask[list(positive_inputs)] = True
        self.register_buffer("first_positive", mask)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes, self.sizes[1:])):
            w = torch.randn(fan_out, fan_in, generator=generator) / math.sqrt(fan_in)
            pos = self.first_positive if i == 0 else torch.full((fan_in,), self.positive)
            # softplus(raw) = |w| + 1e-3 on positive columns
            w = torch.where(pos[None, :], torch.log(torch.expm1(w.abs() + 1e-3)), w)
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(fan_out)))

    def effective(self, i: int) -> torch.Tensor:
        w = self.weights[i]
        if not self.positive:
            return w
        if i == 0:
            return torch.where(self.first_positive[None, :], F.softplus(w), w)
        return F.softplus(w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"shape mismatch: expected last dim {self.sizes[0]}, got {tuple(x.shape)}")
        n = len(self.weights)
        for i in range(n):
            x = _activate(self.acts[i], x @ self.effective(i).T + self.biases[i])
            if i < n - 1 and self.dropout and self.training:
                x = F.dropout(x, self.dropout, training=True)
        return x

    def forward_with_tangent(self, x: torch.Tensor, dx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Output and its directional derivative along ``dx``.

        Leading dimensions beyond the last two share one dropout mask, so a
        stack of inputs (e.g. the same rows at two time offsets) sees the same
        thinned network.
        """
        n = len(self.weights)
        for i in range(n):
            w = self.effective(i)
            z = x @ w.T + self.biases[i]
            dz = dx @ w.T
            x, slope = _activate_with_slope(self.acts[i], z)
            dx = slope * dz
            if i < n - 1 and self.dropout and self.training:
                keep = torch.rand(x.shape[-2:], dtype=x.dtype) >= self.dropout
                m = keep.to(x.dtype) / (1.0 - self.dropout)
                x, dx = x * m, dx * m
        return x, dx


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, gamma):
        ctx.gamma = float(gamma)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.gamma * grad, None


def grl(x: torch.Tensor, gamma: float) -> torch.Tensor:
    """Identity forward; upstream gradient multiplied by ``-gamma`` on the way back."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return GradReverse.apply(x, gamma)


# -- optimisation ------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0


@dataclass
class ParamStore:
    """Named parameters plus per-parameter Adam moments."""

    params: "OrderedDict[str, torch.Tensor]"
    state: dict[str, AdamState] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(OrderedDict(module.named_parameters()))

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.state:
                self.state[name] = AdamState(torch.zeros_like(p), torch.zeros_like(p))
            elif self.state[name].m.shape != p.shape:
                raise ValueError(f"moment shape mismatch for {name}")


@torch.no_grad()
def adam_step(
    store: ParamStore,
    grads: dict[str, Optional[torch.Tensor]],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place.  Parameters with no gradient are skipped."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NonFiniteGradient(f"gradient for {name!r} has {bad} non-finite entries")
    for name, g in grads.items():
        if g is None:
            continue
        p = store.params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        st = store.state[name]
        st.step += 1
        st.m.mul_(beta1).add_(g, alpha=1 - beta1)
        st.v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        m_hat = st.m / (1 - beta1**st.step)
        v_hat = st.v / (1 - beta2**st.step)
        p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def collect_grads(store: ParamStore) -> dict[str, Optional[torch.Tensor]]:
    return {name: p.grad for name, p in store.params.items()}


# -- finite differences ------------------------------------------------------


def central_difference(fn: Callable[[], torch.Tensor], param: torch.Tensor, index: tuple, step: float = 1e-5) -> float:
    """d fn / d param[index] by central differences; ``param`` is perturbed in place and restored."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + step
        up = fn().item()
        param[index] = orig - step
        down = fn().item()
        param[index] = orig
    return (up - down) / (2 * step)


# -- checkpoints -------------------------------------------------------------


def _tensor_record(t: torch.Tensor) -> dict:
    return {"shape": list(t.shape), "values": t.detach().reshape(-1).tolist()}


def _tensor_from(rec: dict) -> torch.Tensor:
    return torch.tensor(rec["values"], dtype=torch.float64).reshape(rec["shape"])


def save_checkpoint(path: Path | str, store: ParamStore, config: dict, extra: Optional[dict] = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": config,
        "params": {n: _tensor_record(p) for n, p in store.params.items()},
        "optimizer": {
            n: {"step": s.step, "m": _tensor_record(s.m), "v": _tensor_record(s.v)} for n, s in store.state.items()
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n")


class CheckpointVersionError(ValueError):
    pass


def read_checkpoint(path: Path | str) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"{path}: checkpoint format {doc.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    doc["params"] = {n: _tensor_from(r) for n, r in doc["params"].items()}
    doc["optimizer"] = {
        n: AdamState(_tensor_from(r["m"]), _tensor_from(r["v"]), int(r["step"])) for n, r in doc["optimizer"].items()
    }
    return doc


@torch.no_grad()
def load_into(store: ParamStore, doc: dict) -> None:
    missing = set(store.params) ^ set(doc["params"])
    if missing:
        raise CheckpointVersionError(f"parameter names differ: {sorted(missing)}")
    for name, p in store.params.items():
        p.copy_(doc["params"][name])
        st = doc["optimizer"][name]
        store.state[name] = AdamState(st.m.clone(), st.v.clone(), st.step)
