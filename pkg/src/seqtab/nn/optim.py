"""Adam optimizer, global-norm gradient clipping, and finite-difference checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingDiverged
from . import autodiff as ad
from .autodiff import Tensor


class Adam:
    """Standard bias-corrected Adam over a named parameter dict.

    `step()` reads each parameter's accumulated `.grad` (missing gradients
    count as zero) and aborts without touching any parameter if a gradient
    is non-finite.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in {name!r}; step aborted")
            grads[name] = g
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)


def gradient_check(
    loss_fn,
    params: dict[str, Tensor],
    *,
    h: float = 1e-4,
    n_samples: int = 200,
    always_include: tuple[str, ...] = (),
    rng: np.random.Generator | None = None,
    rel_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Samples at least one coordinate from every parameter tensor (plus every
    coordinate of the tensors named in `always_include`), spending the rest
    of the budget proportionally to tensor size. The loss closure must be
    deterministic: dropout off, masking fixed. Relative error per coordinate
    is |a - n| / max(|a|, |n|, rel_floor); the floor keeps coordinates whose
    true gradient is essentially zero from amplifying finite-difference
    round-off into spurious failures.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    rng = rng or np.random.default_rng(0)

    with ad.Tape() as tape:
        ad.zero_grads(params)
        loss = loss_fn()
        tape.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    coords: list[tuple[str, tuple]] = []
    names = sorted(params)
    for name in names:
        p = params[name]
        if name in always_include:
            for idx in np.ndindex(p.data.shape or (1,)):
                coords.append((name, idx if p.data.shape else ()))
        else:
            flat = int(rng.integers(p.data.size))
            coords.append((name, np.unravel_index(flat, p.data.shape) if p.data.shape else ()))
    sizes = np.array([params[n].data.size for n in names], dtype=np.float64)
    remaining = max(0, n_samples - len(coords))
    extra = rng.choice(len(names), size=remaining, p=sizes / sizes.sum())
    for i in extra:
        p = params[names[i]]
        flat = int(rng.integers(p.data.size))
        coords.append((names[i], np.unravel_index(flat, p.data.shape) if p.data.shape else ()))

    report = GradCheckReport(0.0, "", (), len(coords))
    for name, idx in coords:
        p = params[name]
        key = idx if idx else ()
        orig = p.data[key] if idx else p.data.item()
        if idx:
            p.data[key] = orig + h
            f_plus = float(loss_fn().data)
            p.data[key] = orig - h
            f_minus = float(loss_fn().data)
            p.data[key] = orig
        else:
            p.data[...] = orig + h
            f_plus = float(loss_fn().data)
            p.data[...] = orig - h
            f_minus = float(loss_fn().data)
            p.data[...] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[name][key]) if idx else float(analytic[name])
        err = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
        report.per_param[name] = max(report.per_param.get(name, 0.0), err)
        if err > report.max_rel_err:
            report.max_rel_err = err
            report.worst_param = name
            report.worst_index = idx
    return report
