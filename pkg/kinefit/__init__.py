try:
    from ._version import version as __version__
except ImportError:
    __version__ = "unknown"
from .errors import BehindCameraError, ConvergenceError, DegenerateGeometryError, DimensionError, ExhaustionError, \
    FilterError, FittingError, GeometryError, GradientCheckError, InsufficientMarkersError, KinefitError, \
    MissingDataError, ModelParseError, ModelValidationError
from .fitting import IKSettings, ReconstructionSettings, fit_scales, inverse_kinematics_frame, \
    inverse_kinematics_sequence, reconstruct_sequence
from .geometry import Camera, KeypointTrack, procrustes_align, project, triangulate_two_view
from .kinematics import MotionSequence, forward_kinematics, jacobian_keypoints, marker_positions
from .losses import LossWeights, gradient_check, loss_gradients, total_loss
from .metrics import evaluation_report, mae_angle, mpjve, pa_mpjpe
from .model import ScaleSet, SkeletalModel, load_generic_model, load_model, validate_model
from .modules import KinematicsLoss
