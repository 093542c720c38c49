import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import torch

from .errors import DimensionError, GradientCheckError
from .functions import absolute_error, range_error, unit_circle_error
from .kinematics import MotionSequence, forward_kinematics, root_relative
from .model import ScaleSet, free_constrained_split

__all__ = [
    "TERMS", "PRESETS", "LOSSES", "LossWeights", "LossLayout", "loss_layout", "angle_loss_free",
    "angle_loss_constrained", "bio_constraint_loss", "scale_loss", "keypoint_position_loss", "total_loss",
    "evaluate_loss", "loss_gradients", "GradientCheckResult", "gradient_check"
]

logger = logging.getLogger(__name__)

TERMS = ("angle", "scale", "bio", "pos")
PRESETS = {
    "angle+scale": ("angle", "scale"),
    "angle+scale+bio": ("angle", "scale", "bio"),
    "angle+scale+pos": ("angle", "scale", "pos"),
    "full": TERMS
}
LOSSES = ("free", "constrained", "bio", "scale", "pos", "total")


@dataclass(frozen=True)
class LossWeights:
    """Weighting of the training objective

    Parameters
    ----------
    lambda_pos : float
        Weight of the keypoint position term.
    terms : tuple of str
        Terms entering the total, a subset of `angle`, `scale`, `bio` and `pos`.
    """
    lambda_pos: float = 100.
    terms: Tuple[str, ...] = TERMS

    def __post_init__(self):
        if not self.lambda_pos >= 0:
            raise ValueError("lambda_pos must be non-negative, got {}".format(self.lambda_pos))
        for term in self.terms:
            if term not in TERMS:
                raise ValueError("Unknown loss term {}".format(term))
        object.__setattr__(self, "terms", tuple(self.terms))

    @classmethod
    def preset(cls, name, lambda_pos=100.):
        if name not in PRESETS:
            raise ValueError("Unknown loss preset {}, expected one of {}".format(name, ", ".join(PRESETS)))
        return cls(lambda_pos, PRESETS[name])


class LossLayout(NamedTuple):
    """Coordinate index sets and ranges the losses need from a model"""
    free: torch.Tensor
    constrained: torch.Tensor
    lower: torch.Tensor
    upper: torch.Tensor


def loss_layout(model):
    free, constrained = free_constrained_split(model)
    ranges = model.ranges
    return LossLayout(torch.tensor(free, dtype=torch.long), torch.tensor(constrained, dtype=torch.long),
                      ranges[:, 0].clone(), ranges[:, 1].clone())


def _values(x):
    if isinstance(x, (MotionSequence, ScaleSet)):
        return x.values
    return torch.as_tensor(x, dtype=torch.float64)


def _scales(model, scales):
    if scales is None:
        return torch.ones(model.num_segments, 3, dtype=torch.float64)
    return _values(scales)


def _pair(pred, truth, what, ndim=2):
    pred, truth = _values(pred), _values(truth)
    if pred.dim() < ndim or truth.dim() < ndim or pred.shape[-ndim:] != truth.shape[-ndim:]:
        raise DimensionError("{} shapes do not match: {} vs {}".format(what, tuple(pred.shape), tuple(truth.shape)))
    try:
        return torch.broadcast_tensors(pred, truth)
    except RuntimeError:
        raise DimensionError("{} batch shapes do not match: {} vs {}".format(
            what, tuple(pred.shape), tuple(truth.shape)))


def angle_loss_free(pred, truth):
    """Unit-circle L1 loss on free rotational coordinates

    Parameters
    ----------
    pred : torch.Tensor
        Predicted angles `(..., T, n)` in radians, restricted to the free rotational coordinates.
    truth : torch.Tensor
        Ground truth angles of the same shape.

    Returns
    -------
    loss : torch.Tensor
        Per-frame L1 distance between `(cos, sin)` embeddings, averaged over frames, shape `(...)`.
    """
    pred, truth = _pair(pred, truth, "free angle")
    return unit_circle_error(pred, truth)


def angle_loss_constrained(pred, truth):
    """Per-frame L1 loss on constrained coordinates, averaged over frames"""
    pred, truth = _pair(pred, truth, "constrained angle")
    return absolute_error(pred, truth, 2)


def bio_constraint_loss(pred, ranges):
    """Penalty on constrained angles outside their range

    The indicator is evaluated on the raw angles and the distance on their unit-circle embedding, so the penalty is
    continuous at the range bounds and saturates for violations beyond half a turn.

    Parameters
    ----------
    pred : torch.Tensor
        Predicted constrained angles `(..., T, n)`.
    ranges : torch.Tensor
        Range matrix `(n, 2)` holding `(min, max)` per coordinate.
    """
    pred = _values(pred)
    ranges = torch.as_tensor(ranges, dtype=torch.float64)
    if pred.dim() < 2 or ranges.shape != (pred.size(-1), 2):
        raise DimensionError("expected ranges of shape ({}, 2), got {}".format(
            pred.size(-1) if pred.dim() > 0 else 0, tuple(ranges.shape)))
    return range_error(pred, ranges[:, 0].expand_as(pred), ranges[:, 1].expand_as(pred))


def scale_loss(pred, truth):
    """L1 norm of the per-segment scale error, averaged over segments"""
    pred, truth = _pair(pred, truth, "scale")
    if pred.size(-1) != 3:
        raise DimensionError("scales must have shape (..., B, 3), got {}".format(tuple(pred.shape)))
    return absolute_error(pred, truth, 2)


def _root_relative_keypoints(model, motion, scales):
    return root_relative(forward_kinematics(model, motion, scales.unsqueeze(-3)), model)


def keypoint_position_loss(model, pred_motion, pred_scales, truth_motion, truth_scales):
    """L1 loss between root-relative keypoints of two motions, averaged over frames and keypoints

    Motions are `(..., T, J)` coordinate tensors (or `MotionSequence`), scales are per-sequence `(..., B, 3)`.
    """
    pred_motion, truth_motion = _values(pred_motion), _values(truth_motion)
    if pred_motion.dim() < 2 or truth_motion.dim() < 2 or pred_motion.size(-2) != truth_motion.size(-2):
        raise DimensionError("motion lengths do not match: {} vs {}".format(
            tuple(pred_motion.shape), tuple(truth_motion.shape)))
    pred = _root_relative_keypoints(model, pred_motion, _scales(model, pred_scales))
    truth = _root_relative_keypoints(model, truth_motion, _scales(model, truth_scales))
    pred, truth = _pair(pred, truth, "keypoint", ndim=3)
    return absolute_error(pred, truth, 3)


def total_loss(model, pred_motion, pred_scales, truth_motion, truth_scales, weights=None, layout=None):
    """Weighted training objective

    Parameters
    ----------
    model : SkeletalModel
        Model defining the coordinate classes, ranges and forward kinematics.
    pred_motion, truth_motion : torch.Tensor or MotionSequence
        Coordinate values `(..., T, J)`.
    pred_scales, truth_scales : torch.Tensor or ScaleSet or None
        Per-sequence scales `(..., B, 3)`.
    weights : LossWeights or None
        Term selection and position weight, defaults to all terms with `lambda_pos = 100`.
    layout : LossLayout or None
        Precomputed index sets, derived from `model` when omitted.

    Returns
    -------
    total : torch.Tensor
        `L_angle + L_scale + L_bio + lambda_pos * L_pos` restricted to the selected terms.
    breakdown : dict
        Every evaluated term by name (`angle_free`, `angle_constrained`, `angle`, `scale`, `bio`, `pos`, `total`).
    """
    weights = LossWeights() if weights is None else weights
    layout = loss_layout(model) if layout is None else layout
    pm, tm = _values(pred_motion), _values(truth_motion)
    ps, ts = _scales(model, pred_scales), _scales(model, truth_scales)

    breakdown = {}
    total = None
    if "angle" in weights.terms:
        breakdown["angle_free"] = angle_loss_free(pm[..., layout.free], tm[..., layout.free])
        breakdown["angle_constrained"] = angle_loss_constrained(pm[..., layout.constrained],
                                                                tm[..., layout.constrained])
        breakdown["angle"] = breakdown["angle_free"] + breakdown["angle_constrained"]
        total = breakdown["angle"]
    if "scale" in weights.terms:
        breakdown["scale"] = scale_loss(ps, ts)
        total = breakdown["scale"] if total is None else total + breakdown["scale"]
    if "bio" in weights.terms:
        breakdown["bio"] = bio_constraint_loss(pm[..., layout.constrained],
                                               torch.stack([layout.lower, layout.upper], dim=1))
        total = breakdown["bio"] if total is None else total + breakdown["bio"]
    if "pos" in weights.terms:
        breakdown["pos"] = keypoint_position_loss(model, pm, ps, tm, ts)
        weighted = weights.lambda_pos * breakdown["pos"]
        total = weighted if total is None else total + weighted

    if total is None:
        total = pm.new_zeros(())
    breakdown["total"] = total
    return total, breakdown


def evaluate_loss(loss, model, pred_motion, pred_scales, truth_motion, truth_scales, weights=None):
    """Evaluate one loss of the suite by name (see `LOSSES`)"""
    layout = loss_layout(model)
    pm, tm = _values(pred_motion), _values(truth_motion)
    if loss == "free":
        return angle_loss_free(pm[..., layout.free], tm[..., layout.free])
    elif loss == "constrained":
        return angle_loss_constrained(pm[..., layout.constrained], tm[..., layout.constrained])
    elif loss == "bio":
        return bio_constraint_loss(pm[..., layout.constrained], model.ranges)
    elif loss == "scale":
        return scale_loss(_scales(model, pred_scales), _scales(model, truth_scales))
    elif loss == "pos":
        return keypoint_position_loss(model, pm, pred_scales, tm, truth_scales)
    elif loss == "total":
        return total_loss(model, pm, pred_scales, tm, truth_scales, weights, layout)[0]
    else:
        raise ValueError("Unknown loss {}, expected one of {}".format(loss, ", ".join(LOSSES)))


def loss_gradients(loss, model, pred_motion, pred_scales, truth_motion, truth_scales, wrt="coordinates",
                   weights=None):
    """Analytic gradient of a loss with respect to the predicted coordinates or scales

    L1 terms use the zero subgradient at ties. Returns a tensor shaped like the predicted motion `(..., T, J)` for
    `wrt="coordinates"` or like the predicted scales `(..., B, 3)` for `wrt="scales"`.
    """
    if wrt not in ("coordinates", "scales"):
        raise ValueError("Unknown derivative target {}".format(wrt))
    pm = _values(pred_motion).detach().clone().requires_grad_(wrt == "coordinates")
    ps = _scales(model, pred_scales).detach().clone().requires_grad_(wrt == "scales")
    target = pm if wrt == "coordinates" else ps

    value = evaluate_loss(loss, model, pm, ps, truth_motion, truth_scales, weights)
    if not value.requires_grad:
        return torch.zeros_like(target)
    grad, = torch.autograd.grad(value.sum(), target, allow_unused=True)
    return torch.zeros_like(target) if grad is None else grad


class GradientCheckResult(NamedTuple):
    loss: str
    draws: int
    passed: int
    max_error: float
    threshold: float

    @property
    def pass_rate(self):
        return self.passed / self.draws

    @property
    def ok(self):
        return self.pass_rate >= self.threshold


def _sample(model, generator, frames):
    lower, upper = model.bounds
    rotational = model.rotational
    constrained = torch.isfinite(lower)
    lo = torch.where(constrained, lower, torch.where(rotational, torch.full_like(lower, -math.pi),
                                                     torch.full_like(lower, -0.5)))
    hi = torch.where(constrained, upper, -lo)

    # Predictions reach past the ranges so the range penalty is exercised
    margin = torch.where(constrained, torch.full_like(lower, 0.3), torch.zeros_like(lower))
    u = torch.rand(2, frames, model.num_coordinates, generator=generator, dtype=torch.float64)
    truth = lo + (hi - lo) * u[0]
    pred = (lo - margin) + (hi - lo + 2 * margin) * u[1]
    scales = 0.8 + 0.4 * torch.rand(2, model.num_segments, 3, generator=generator, dtype=torch.float64)
    return pred, scales[0], truth, scales[1]


def _off_tie(loss, model, layout, pm, ps, tm, ts, margin):
    checks = []
    if loss in ("free", "total"):
        p, t = pm[..., layout.free], tm[..., layout.free]
        checks += [torch.cos(p) - torch.cos(t), torch.sin(p) - torch.sin(t)]
    if loss in ("constrained", "total"):
        checks.append(pm[..., layout.constrained] - tm[..., layout.constrained])
    if loss in ("bio", "total"):
        p = pm[..., layout.constrained]
        for bound in (layout.lower, layout.upper):
            checks += [p - bound, torch.cos(p) - torch.cos(bound), torch.sin(p) - torch.sin(bound)]
    if loss in ("scale", "total"):
        checks.append(ps - ts)
    if loss in ("pos", "total"):
        diff = _root_relative_keypoints(model, pm, ps) - _root_relative_keypoints(model, tm, ts)
        keep = torch.arange(model.num_keypoints) != model.root
        checks.append(diff[..., keep, :])
    return all(bool((c.abs() > margin).all()) for c in checks)


def gradient_check(model, loss, seed=0, draws=1000, frames=2, step=1e-6, rtol=1e-4, pass_fraction=0.99,
                   weights=None, margin=1e-4):
    """Compare analytic gradients of a loss with central finite differences

    Each draw samples a random prediction / ground truth pair away from the non-smooth ties of the L1 terms and
    passes when `max|g - g_fd| <= rtol * max(max|g_fd|, 1e-8)` over all coordinates and scale factors.

    Returns
    -------
    result : GradientCheckResult
        Pass count and worst relative error over the draws, `result.ok` applies the `pass_fraction` threshold.
    """
    if loss not in LOSSES:
        raise ValueError("Unknown loss {}, expected one of {}".format(loss, ", ".join(LOSSES)))
    generator = torch.Generator().manual_seed(int(seed) * len(LOSSES) + LOSSES.index(loss))
    layout = loss_layout(model)
    T, J, B = frames, model.num_coordinates, model.num_segments

    passed, worst = 0, 0.
    for _ in range(draws):
        for _attempt in range(100):
            pm, ps, tm, ts = _sample(model, generator, frames)
            if _off_tie(loss, model, layout, pm, ps, tm, ts, margin):
                break
        else:
            raise GradientCheckError("could not draw an input away from the {} loss ties".format(loss))

        grad = torch.cat([
            loss_gradients(loss, model, pm, ps, tm, ts, "coordinates", weights).flatten(),
            loss_gradients(loss, model, pm, ps, tm, ts, "scales", weights).flatten()])

        # All +h / -h perturbations evaluated as one batch
        params = torch.cat([pm.flatten(), ps.flatten()])
        n = params.numel()
        steps = step * torch.eye(n, dtype=torch.float64)
        batch = torch.cat([params + steps, params - steps], dim=0)
        with torch.no_grad():
            values = evaluate_loss(loss, model, batch[:, :T * J].reshape(2 * n, T, J),
                                   batch[:, T * J:].reshape(2 * n, B, 3), tm, ts, weights)
        grad_fd = (values[:n] - values[n:]) / (2 * step)

        scale = max(grad_fd.abs().max().item(), 1e-8)
        error = (grad - grad_fd).abs().max().item() / scale
        worst = max(worst, error)
        if error <= rtol:
            passed += 1

    result = GradientCheckResult(loss, draws, passed, worst, pass_fraction)
    logger.info("gradient check %s: %d/%d draws passed, worst relative error %.3e", loss, passed, draws, worst)
    return result
