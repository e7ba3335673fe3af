"""Hypergradients through unrolled inner optimization, with exact oracles for quadratic problems."""

from .core import (BilevelError, Dataset, DimensionError, DivergenceError, Episode, HyperParams,
                   InnerParams, RngSeed, StepSchedule, TrajectoryTape, split_dataset)
from .dynamics import DynamicsSpec, contraction_rate, unroll
from .estimators import HyperRepresentation, HyperRidgeRegressor
from .exact import (ConvexityCertificate, argmin_convergence_study, certificate, eval_f_exact,
                    ridge_closed_form, uniform_convergence_study)
from .hypergrad import (HypergradReport, approx_hg, batch_hg, forward_hg, implicit_hg,
                        reverse_hg)
from .meta import (EpisodeSampler, FoldSpec, HyperReprProblem, gen_appendixC_data, kfold_outer,
                   mape, meta_fT, meta_hypergrad, sample_batch)
from .outer import OuterOptState, RunLog, StopPolicy, adam_step, hyper_iterate
from .problems import (BilevelProblem, DiagTikhonovRidge, FeatureMapRidge, SharedOffsetLinear,
                       SoftmaxRegression, ValidationLoss, outer_grads)

__version__ = "0.1.0"
