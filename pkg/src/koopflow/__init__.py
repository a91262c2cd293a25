"""Continuous-time Koopman autoencoders.

Learn a discrete latent evolution matrix K from regularly sampled
trajectories, extract its real generator D = log K through the
eigendecomposition, and predict system state at arbitrary real-valued times.
"""

from . import continuous, evalharness, koopman, net, numlin, systems
from .continuous import (
    ContinuousOperator,
    extract_generator,
    latent_linear_interp,
    predict_continuous,
    upsample_forecast,
)
from .evalharness import EvalReport, LyapunovConfig, evaluate_model, k_spectrum, lyapunov_spectrum, mse
from .koopman import (
    KoopmanModel,
    LossBreakdown,
    TrainConfig,
    decode,
    encode,
    load_checkpoint,
    loss_L1,
    loss_L2,
    loss_lin,
    loss_long_baseline,
    loss_orth,
    loss_pred,
    model_init,
    predict_discrete,
    save_checkpoint,
    train_two_stage,
)
from .systems import Dataset, GenerateConfig, Trajectory, generate_dataset, get_system, simulate, subsample

__version__ = "0.1.0"
