import torch.nn as nn

from .losses import TERMS, LossLayout, LossWeights, loss_layout, total_loss


class KinematicsLoss(nn.Module):
    """Biomechanics-aware training objective

    This gathers the angle, scale, range and keypoint position terms of a skeletal model in a single module, so a
    learner predicting joint angles and segment scales can back-propagate through the analytic loss gradients.

    Parameters
    ----------
    model : SkeletalModel
        Skeletal model providing coordinate classes, ranges and forward kinematics.
    lambda_pos : float
        Weight of the keypoint position term.
    terms : tuple of str
        Terms entering the total, see `LossWeights`.
    """

    def __init__(self, model, lambda_pos=100., terms=TERMS):
        super(KinematicsLoss, self).__init__()
        self.model = model
        self.weights = LossWeights(lambda_pos, tuple(terms))

        layout = loss_layout(model)
        self.register_buffer("free_index", layout.free)
        self.register_buffer("constrained_index", layout.constrained)
        self.register_buffer("range_min", layout.lower)
        self.register_buffer("range_max", layout.upper)
        self.last_breakdown = {}

    @property
    def layout(self):
        return LossLayout(self.free_index, self.constrained_index, self.range_min, self.range_max)

    def forward(self, pred_motion, pred_scales, truth_motion, truth_scales):
        total, breakdown = total_loss(self.model, pred_motion, pred_scales, truth_motion, truth_scales,
                                      self.weights, self.layout)
        self.last_breakdown = {k: v.detach() for k, v in breakdown.items()}
        return total

    def extra_repr(self):
        rep = "model={}, lambda_pos={lambda_pos}, terms={terms}".format(self.model.name, **self.weights.__dict__)
        return rep
