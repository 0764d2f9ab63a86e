"""unbias: task-discriminative representations that are statistically
independent of a specified attribute.

The package trains a classifier jointly with a neural mutual-information
estimator in an alternating min-max loop: the estimator tracks how much
attribute information the learned embedding carries, and the classifier
is penalized for it.
"""

from .data import (ColoredDigitSpec, Dataset, MIFixture, encode_color_attribute,
                   generate_colored_digits, load_digit_base, load_german, load_idx,
                   make_mi_fixture)
from .metrics import EOReport, equal_opportunity, gaussian_mi, plugin_discrete_mi
from .mine import MIEstimate, StatisticsNetwork, estimate_mi, mine_loss, shuffle_marginal
from .nn import (Adam, Conv2d, FeatureExtractor, Linear, LogitClassifier, SGD,
                 clip_gradients, cross_entropy, digit_feature_extractor,
                 forward_classify, load_params, mlp_feature_extractor, save_params)
from .tensor import GradCheckReport, NonFiniteError, ShapeError, Tape, Tensor, grad_check
from .trainer import (RunLog, TrainConfig, TrainingDiverged, evaluate, fit,
                      select_lambda, steps_for_epochs)

__version__ = "0.1.0"
