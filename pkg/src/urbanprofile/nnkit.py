"""Differentiable numeric primitives with a verified-gradient contract.

Tensors are torch tensors (f32 for training, f64 for gradient checking);
autograd supplies analytic gradients. What this module adds on top:
shape-checked functional ops used by the model, a hand-rolled Adam step over
named parameter maps, and a finite-difference gradient checker that is
independent of autograd. Every differentiable op is expected to pass
grad_check at f64 (< 1e-6 single ops, < 1e-4 composite losses).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

Tensor = torch.Tensor
ParameterSet = dict[str, Tensor]

# Additive mask value standing in for -inf; exp() underflows to exactly 0.0.
MASK_VALUE = -1e9

# When True, ops assert their outputs are finite (debug mode).
DEBUG_CHECK_FINITE = False


def assert_finite(x: Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {name}")


def _debug_check(x: Tensor, name: str) -> Tensor:
    if DEBUG_CHECK_FINITE:
        assert_finite(x, name)
    return x


def parameter_set(module: torch.nn.Module) -> ParameterSet:
    """Named-tensor view of a module's learnable parameters."""
    return dict(module.named_parameters())


def trunc_normal_(tensor: Tensor, std: float = 0.02) -> Tensor:
    return torch.nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std)


# ---------------------------------------------------------------------------
# Functional ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: x {tuple(x.shape)} vs w {tuple(w.shape)}")
    out = x @ w
    if b is not None:
        if b.shape[-1] != w.shape[1]:
            raise ValueError(f"linear bias mismatch: w {tuple(w.shape)} vs b {tuple(b.shape)}")
        out = out + b
    return _debug_check(out, "linear")


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    """Exp-normalize along dim with max subtraction for stability."""
    shifted = x - x.max(dim=dim, keepdim=True).values
    e = shifted.exp()
    return _debug_check(e / e.sum(dim=dim, keepdim=True), "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token zero mean, unit variance over the last axis, then affine."""
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    normed = (x - mean) / torch.sqrt(var + eps)
    return _debug_check(normed * gain + bias, "layer_norm")


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Tensor | None = None,
    scale: float | None = None,
) -> Tensor:
    """softmax(q k^T * scale) v with optional boolean mask (True = attend)."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"attention head dims differ: q {tuple(q.shape)} vs k {tuple(k.shape)}"
        )
    if scale is None:
        scale = 1.0 / (q.shape[-1] ** 0.5)
    logits = (q @ k.transpose(-2, -1)) * scale
    if mask is not None:
        mask = mask.broadcast_to(logits.shape)
        if (~mask).all(dim=-1).any():
            raise ValueError("attention: a query row has all keys masked")
        logits = logits + (~mask).to(logits.dtype) * MASK_VALUE
    weights = softmax(logits, dim=-1)
    return _debug_check(weights @ v, "attention")


@dataclass
class AttentionParams:
    """Projection weights of one multi-head attention block."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: AttentionParams,
    n_heads: int,
    mask: Tensor | None = None,
) -> Tensor:
    """Project to Q/K/V, split heads, attend, concat, apply the output map.

    Cross attention falls out of x_q != x_kv. The mask broadcasts over batch
    and head axes; scaling is 1/sqrt(d_head) everywhere.
    """
    d = params.wq.shape[0]
    if d % n_heads:
        raise ValueError(f"embed dim {d} not divisible by n_heads {n_heads}")
    d_head = d // n_heads

    if n_heads == 1:
        # plain attention over the full width; identical op sequence, so the
        # single-head case is exactly attention composed with the projections
        out = attention(
            linear(x_q, params.wq),
            linear(x_kv, params.wk),
            linear(x_kv, params.wv),
            mask=mask,
            scale=1.0 / (d_head**0.5),
        )
        return linear(out, params.wo)

    def split_heads(t: Tensor) -> Tensor:
        *lead, n, _ = t.shape
        return t.reshape(*lead, n, n_heads, d_head).transpose(-3, -2)

    q = split_heads(linear(x_q, params.wq))
    k = split_heads(linear(x_kv, params.wk))
    v = split_heads(linear(x_kv, params.wv))
    if mask is not None:
        mask = mask.unsqueeze(-3)  # broadcast over heads
    out = attention(q, k, v, mask=mask, scale=1.0 / (d_head**0.5))
    out = out.transpose(-3, -2)
    out = out.reshape(*out.shape[:-2], d)
    return linear(out, params.wo)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment tensors and step counter for a named parameter map."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, lr: float, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for name, p in params.items():
            state.m[name] = torch.zeros_like(p, requires_grad=False)
            state.v[name] = torch.zeros_like(p, requires_grad=False)
        return state


def adam_step(
    params: ParameterSet, grads: dict[str, Tensor | None], state: AdamState
) -> None:
    """Standard bias-corrected Adam update, in place.

    Parameters with a None gradient are left untouched (their moments too),
    so loss terms with zero weight never move their private parameters.
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient for parameter {name!r}")
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {tuple(g.shape)} != parameter shape "
                    f"{tuple(p.shape)} for {name!r}"
                )
            m = state.m[name]
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = m / bias1
            v_hat = v / bias2
            p.add_(-state.lr * m_hat / (v_hat.sqrt() + state.eps))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[ParameterSet], Tensor],
    params: ParameterSet,
    probe_count: int = 30,
    h: float = 1e-5,
    seed: int = 0,
    noise_floor: float | None = None,
) -> float:
    """Central finite differences vs analytic gradient on random entries.

    f must map the parameter set to a scalar, evaluable in f64. Returns the
    max relative error with denominator max(|analytic|, |numeric|, 1e-8).
    The numeric route never touches autograd, so it stays an independent
    oracle for it.

    Disagreements below the f64 finite-difference resolution (~|f|*eps/h)
    count as agreement: below that floor the central difference carries no
    information about the true derivative, whatever its value.
    """
    names = sorted(params)
    leaves = {n: params[n].detach().double().clone().requires_grad_(True) for n in names}
    loss = f(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    analytic = {
        n: (g if g is not None else torch.zeros_like(leaves[n]))
        for n, g in zip(names, grads)
    }
    if noise_floor is None:
        noise_floor = max(1.0, abs(float(loss.detach()))) * 2.3e-16 / h * 8.0

    rng = np.random.default_rng(seed)
    sizes = [leaves[n].numel() for n in names]
    total = sum(sizes)
    probes = rng.choice(total, size=min(probe_count, total), replace=False)

    def flat_entry(offset: int) -> tuple[str, int]:
        for n, size in zip(names, sizes):
            if offset < size:
                return n, offset
            offset -= size
        raise IndexError(offset)

    max_rel = 0.0
    with torch.no_grad():
        for offset in probes:
            name, idx = flat_entry(int(offset))
            flat = leaves[name].view(-1)
            original = flat[idx].item()
            flat[idx] = original + h
            f_plus = float(f(leaves))
            flat[idx] = original - h
            f_minus = float(f(leaves))
            flat[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].view(-1)[idx])
            if abs(a - numeric) <= noise_floor:
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
