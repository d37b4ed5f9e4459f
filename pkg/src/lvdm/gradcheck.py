"""Finite-difference validation of analytic gradients.

Central differences around the current parameter values, compared coordinate
by coordinate against autograd. Run the model in float64 when you can; at
float32 use a coarser step (1e-2) or expect the comparison to drown in
rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class GradCheckReport:
    max_rel_err: float
    frac_within: float          # fraction of coordinates with rel err < threshold
    threshold: float
    num_coords: int
    worst: tuple = ()           # (param name, flat index, analytic, numeric)
    rel_errors: list = field(default_factory=list)

    def __str__(self):
        return (
            f"{self.num_coords} coords: max rel err {self.max_rel_err:.3e}, "
            f"{100 * self.frac_within:.1f}% within {self.threshold:g}"
        )


def grad_check(
    fn,
    params,
    eps: float = 1e-3,
    num_coords: int = 200,
    threshold: float = 1e-3,
    generator=None,
) -> GradCheckReport:
    """fn() -> scalar loss closing over params (name -> tensor with grad)."""
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"p{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        if p.grad is not None:
            p.grad = None
    loss = fn()
    if loss.ndim != 0:
        raise ValueError("grad_check needs a scalar-valued callable")
    if not torch.isfinite(loss):
        raise ValueError(f"callable returned a non-finite value: {loss.item()}")
    loss.backward()
    analytic = {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for name, p in named}

    if generator is None:
        generator = torch.Generator().manual_seed(0)
    sizes = [p.numel() for _, p in named]
    total = sum(sizes)
    picks = torch.randperm(total, generator=generator)[: min(num_coords, total)]

    rel_errors = []
    worst = ()
    max_rel = 0.0
    for flat in picks.tolist():
        # locate the owning parameter
        idx = flat
        for (name, p), size in zip(named, sizes):
            if idx < size:
                break
            idx -= size
        with torch.no_grad():
            orig = p.view(-1)[idx].item()
            p.view(-1)[idx] = orig + eps
            up = fn().item()
            p.view(-1)[idx] = orig - eps
            down = fn().item()
            p.view(-1)[idx] = orig
        if not (torch.isfinite(torch.tensor(up)) and torch.isfinite(torch.tensor(down))):
            raise ValueError(f"non-finite loss while perturbing {name}[{idx}]")
        numeric = (up - down) / (2 * eps)
        a = analytic[name].view(-1)[idx].item()
        denom = max(abs(a), abs(numeric), 1e-8)
        rel = abs(a - numeric) / denom
        rel_errors.append(rel)
        if rel > max_rel:
            max_rel = rel
            worst = (name, idx, a, numeric)
    within = sum(1 for r in rel_errors if r < threshold) / max(1, len(rel_errors))
    return GradCheckReport(
        max_rel_err=max_rel,
        frac_within=within,
        threshold=threshold,
        num_coords=len(rel_errors),
        worst=worst,
        rel_errors=rel_errors,
    )
