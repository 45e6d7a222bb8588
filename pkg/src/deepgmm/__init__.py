"""Unsupervised image segmentation with Gaussian mixtures, EM and CNN-predicted responsibilities."""
from .deep_em import DeepFitOptions, deep_fit_single, deep_train_multi, estimate_mu_data, predict
from .errors import DeepGMMError
from .evaluation import DiceReport, best_permutation_dice, boundary_length, dice, identity_dice
from .gmm import EMOptions, MixtureParams, e_step, em_fit, m_step, nll
from .image import (
    MultiChannelImage,
    PixelDomain,
    ResponsibilityField,
    SegmentationMask,
    argmax_labeling,
    normalize_image,
)
from .kernels import BACKEND
from .losses import mu_regularizer
from .network import NetworkConfig, NetworkState, finite_diff_check, forward, init_state
from .svgmm import SpatialMixtureParams, e_step_v, em_fit_v, m_step_v, nll_v

__version__ = "0.1.0"
