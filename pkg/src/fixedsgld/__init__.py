"""Fixed step-size stochastic-gradient Langevin samplers with exact toy-model oracles."""

from .gradients import (
    CovarianceEstimate,
    GradientEstimate,
    InsufficientSampleError,
    InvalidSchemeError,
    MinibatchScheme,
    SamplingMode,
    estimate_gradient,
    estimate_gradient_covariance,
    exact_gradient_covariance,
    sample_minibatch,
)
from .models import (
    DegenerateDataError,
    GaussianConjugateModel,
    LogisticRegressionModel,
    OuProcess,
    generate_logistic_data,
    generate_toy_data,
    model_gradients,
    toy_posterior_params,
    toy_var_b,
)
from .samplers import (
    MSGLD,
    RWM,
    SGLD,
    ChainSpec,
    DivergenceError,
    Euler,
    RunningStats,
    euler_step,
    msgld_step,
    run_chain,
    run_linear_chain,
    rwm_step,
    sgld_step,
)

__version__ = "0.1.0"
