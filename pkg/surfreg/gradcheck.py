"""Central finite differences for checking autograd gradients."""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

LossFn = Callable[[], torch.Tensor]


@dataclass
class GradientComparison:
    """Autograd and finite-difference gradients at the same parameter entries."""

    indices: torch.Tensor
    analytic: torch.Tensor
    numeric: torch.Tensor

    @property
    def max_relative_error(self) -> float:
        scale = torch.maximum(self.analytic.abs(), self.numeric.abs()).clamp_min(1e-12)
        return float(((self.analytic - self.numeric).abs() / scale).max())

    def max_entry_error(self, floor: float = 1e-6) -> float:
        """Worst ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)`` over the checked entries."""
        scale = torch.maximum(self.analytic.abs(), self.numeric.abs()).clamp_min(floor)
        return ((self.analytic - self.numeric).abs() / scale).max().item()

    @property
    def relative_norm_error(self) -> float:
        """``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` over all checked entries."""
        scale = max(float(self.analytic.norm()), float(self.numeric.norm()), 1e-30)
        return float((self.analytic - self.numeric).norm()) / scale


def finite_difference_gradient(
    fn: LossFn,
    param: torch.Tensor,
    indices: Sequence[int],
    h: float = 1e-5,
) -> torch.Tensor:
    """``(f(p + h e_i) - f(p - h e_i)) / 2h`` for each flat index of ``param``."""
    flat = param.data.view(-1)
    grads = []
    with torch.no_grad():
        for i in indices:
            original = flat[i].item()
            flat[i] = original + h
            plus = float(fn())
            flat[i] = original - h
            minus = float(fn())
            flat[i] = original
            grads.append((plus - minus) / (2 * h))
    return torch.tensor(grads, dtype=torch.float64)


def autograd_gradient(fn: LossFn, param: torch.Tensor, indices: Sequence[int]) -> torch.Tensor:
    """Reverse-mode gradient of ``fn`` at the given flat indices of ``param``."""
    if param.grad is not None:
        param.grad = None
    loss = fn()
    (grad,) = torch.autograd.grad(loss, param, allow_unused=True)
    if grad is None:
        return torch.zeros(len(indices), dtype=torch.float64)
    return grad.reshape(-1)[torch.as_tensor(list(indices))].detach().double()


def compare_gradients(
    fn: LossFn,
    param: torch.Tensor,
    indices: Optional[Sequence[int]] = None,
    n_entries: int = 16,
    h: float = 1e-5,
    seed: int = 0,
) -> GradientComparison:
    """Compare autograd and central differences on a subset of entries.

    Without explicit ``indices`` the entries with the largest autograd gradient
    magnitude are preferred, padded with random ones.
    """
    if indices is None:
        loss = fn()
        (full,) = torch.autograd.grad(loss, param, allow_unused=True)
        full = torch.zeros_like(param) if full is None else full
        magnitude = full.detach().reshape(-1).abs()
        top = torch.argsort(magnitude, descending=True, stable=True)[: n_entries // 2]
        g = torch.Generator().manual_seed(seed)
        extra = torch.randperm(param.numel(), generator=g)[: n_entries - len(top)]
        indices = torch.unique(torch.cat([top, extra])).tolist()
    indices = list(indices)
    analytic = autograd_gradient(fn, param, indices)
    numeric = finite_difference_gradient(fn, param, indices, h)
    return GradientComparison(torch.as_tensor(indices), analytic, numeric)
