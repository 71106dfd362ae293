"""Dynamical-isometry fair architecture search at desk scale."""

from .autograd import Tensor, DimensionError, NumericOverflowError
from .isoinit import InitSpec, OrthogonalFactor, calibrate_gain, orthogonalize_triangular
from .layers import BNParams, LayerParams, Tape, backward_bn_only, forward_block, jacobian_of
from .meanfield import (FixedPoint, GaussianMoments, SpectralStats, VarianceMap,
                        check_isometry, chi, estimate_p_linear, gaussian_moments,
                        solve_fixed_point, spectral_stats, variance_step)
from .search import Constraint, RankedSubnet, ScoreTable, compute_scores, \
    flops_and_params, search_topk, select_top_per_layer
from .supernet import (LAYER_ID, BlockTemplate, LayerSlot, PathSample, SearchSpace,
                       Supernet, build_supernet, fair_sample_round, train_indicators)
from .concentration import (ConcentrationReport, OrliczEstimate, TheoremConfig,
                            compute_R, cyclic_conv, deviation_experiment,
                            estimate_orlicz, verify_subgaussian_patch_bound)

__version__ = "0.1.0"
