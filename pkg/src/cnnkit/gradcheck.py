"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Parameter, Tensor, backward, no_grad, recording


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    flagged: list[tuple[int, ...]] = field(default_factory=list)
    worst: tuple[int, ...] | None = None

    def __float__(self) -> float:
        return self.max_rel_error

    def __lt__(self, other: float) -> bool:
        return self.max_rel_error < other


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4,
                      max_coords: int | None = None, seed: int = 0) -> GradCheck:
    """Compare the taped gradient of scalar ``f`` at ``x`` with central differences.

    The error per coordinate is ``|a - c| / (|a| + |c| + eps)``.  Coordinates
    where ``f`` is not differentiable inside the probe interval (a ReLU kink,
    say) are reported in ``flagged`` and excluded from the maximum.  A
    :class:`Parameter` argument is perturbed in place, which lets ``f`` close
    over a whole module.
    """
    if isinstance(x, Parameter):
        target = x
    else:
        data = x.data if isinstance(x, Tensor) else x
        target = Parameter(np.array(data, dtype=np.float64), kind="input")

    target.zero_grad()
    with recording() as tape:
        out = f(target)
        if out.size != 1:
            raise ValueError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
        backward(out, tape)
    analytic = target.grad.copy()

    base = target.data.copy()

    def value(v: np.ndarray) -> float:
        target.data = v
        with no_grad():
            r = float(f(target).data.reshape(-1)[0])
        target.data = base
        return r

    coords = list(np.ndindex(base.shape))
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        coords = [coords[i] for i in sorted(rng.choice(len(coords), max_coords, replace=False))]

    f0 = value(base.copy())
    worst, worst_idx, flagged = 0.0, None, []
    for idx in coords:
        probes = {}
        for h in (eps, eps / 10):
            xp = base.copy()
            xp[idx] += h
            xm = base.copy()
            xm[idx] -= h
            probes[h] = (value(xp), value(xm))
        fp, fm = probes[eps]
        sp, sm = probes[eps / 10]
        central = (fp - fm) / (2 * eps)
        central_small = (sp - sm) / (2 * eps / 10)
        jump = (fp - f0) / eps - (f0 - fm) / eps
        jump_small = (sp - f0) / (eps / 10) - (f0 - sm) / (eps / 10)
        scale = abs(central) + abs(central_small) + 1e-9
        kink_at_x = abs(jump) > 1e-6 * scale and abs(jump_small) > 0.5 * abs(jump)
        kink_near = abs(central - central_small) > 1e-3 * scale + 1e-8
        if kink_at_x or kink_near:
            flagged.append(idx)
            continue
        a = analytic[idx]
        err = abs(a - central) / (abs(a) + abs(central) + eps)
        if err > worst:
            worst, worst_idx = err, idx
    return GradCheck(float(worst), len(coords) - len(flagged), flagged, worst_idx)


def check_module(loss_fn: Callable[[], Tensor], params, eps: float = 1e-4,
                 max_coords: int | None = 24, seed: int = 0) -> dict[str, GradCheck]:
    """Run :func:`finite_diff_check` on every parameter read by ``loss_fn``."""
    out = {}
    for i, p in enumerate(params):
        out[p.name or str(i)] = finite_diff_check(lambda _p: loss_fn(), p, eps, max_coords, seed + i)
    return out
