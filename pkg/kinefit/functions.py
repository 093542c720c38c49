import torch
import torch.autograd as autograd
from torch.autograd.function import once_differentiable


def _normalizer(x, ndim):
    """Number of groups in the last `ndim` dimensions, the innermost dimension forms one group"""
    count = 1
    for size in x.shape[x.dim() - ndim:-1]:
        count *= size
    return max(count, 1)


def _expand_grad(dy, ndim):
    for _ in range(ndim):
        dy = dy[..., None]
    return dy


def unit_circle_distance(x, y):
    """Elementwise L1 distance between the unit-circle embeddings of two angle tensors"""
    return (torch.cos(x) - torch.cos(y)).abs() + (torch.sin(x) - torch.sin(y)).abs()


def _unit_circle_grad(x, y):
    """Subgradient of `unit_circle_distance` with respect to `x`, zero at ties"""
    return -torch.sign(torch.cos(x) - torch.cos(y)) * torch.sin(x) + torch.sign(torch.sin(x) - torch.sin(y)) * \
        torch.cos(x)


class AbsoluteError(autograd.Function):
    """Sum of absolute differences over the last `ndim` dimensions, divided by the number of groups

    The innermost dimension is treated as one vector, so `(T, n)` inputs give the per-frame L1 norm averaged over T.
    """

    @staticmethod
    def forward(ctx, x, y, ndim=2):
        ctx.ndim = ndim
        ctx.count = _normalizer(x, ndim)
        diff = x - y
        ctx.save_for_backward(diff)
        return diff.abs().sum(dim=tuple(range(-ndim, 0))) / ctx.count

    @staticmethod
    @once_differentiable
    def backward(ctx, dy):
        diff, = ctx.saved_tensors
        dx = torch.sign(diff) * _expand_grad(dy, ctx.ndim) / ctx.count
        return dx if ctx.needs_input_grad[0] else None, -dx if ctx.needs_input_grad[1] else None, None


class UnitCircleError(autograd.Function):
    """Like `AbsoluteError`, but on the `(cos, sin)` embedding of every angle"""

    @staticmethod
    def forward(ctx, x, y):
        ctx.count = _normalizer(x, 2)
        ctx.save_for_backward(x, y)
        return unit_circle_distance(x, y).sum(dim=(-2, -1)) / ctx.count

    @staticmethod
    @once_differentiable
    def backward(ctx, dl):
        x, y = ctx.saved_tensors
        dl = _expand_grad(dl, 2) / ctx.count

        dx = _unit_circle_grad(x, y) * dl if ctx.needs_input_grad[0] else None
        dy = _unit_circle_grad(y, x) * dl if ctx.needs_input_grad[1] else None
        return dx, dy


def range_violation(x, lower, upper):
    """Elementwise range penalty: unit-circle distance to the violated bound, gated on the raw angle"""
    above = (x >= upper).to(x.dtype)
    below = (x <= lower).to(x.dtype)
    return above * unit_circle_distance(x, upper) + below * unit_circle_distance(x, lower)


class RangeViolation(autograd.Function):
    @staticmethod
    def forward(ctx, x, lower, upper):
        ctx.count = _normalizer(x, 2)
        ctx.save_for_backward(x, lower, upper)
        return range_violation(x, lower, upper).sum(dim=(-2, -1)) / ctx.count

    @staticmethod
    @once_differentiable
    def backward(ctx, dy):
        x, lower, upper = ctx.saved_tensors
        if not ctx.needs_input_grad[0]:
            return None, None, None

        above = (x >= upper).to(x.dtype)
        below = (x <= lower).to(x.dtype)
        grad = above * _unit_circle_grad(x, upper) + below * _unit_circle_grad(x, lower)
        return grad * _expand_grad(dy, 2) / ctx.count, None, None


def absolute_error(x, y, ndim=2):
    return AbsoluteError.apply(x, y, ndim)


def unit_circle_error(x, y):
    return UnitCircleError.apply(x, y)


def range_error(x, lower, upper):
    return RangeViolation.apply(x, lower, upper)


__all__ = ["absolute_error", "unit_circle_error", "range_error", "unit_circle_distance", "range_violation"]
