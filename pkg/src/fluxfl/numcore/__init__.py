from .linalg import ConfigurationError, as_matrix, jacobi_eigh, sym_sqrt
from .mlp import (
    MlpModel,
    NumericInstabilityError,
    accuracy,
    latents_of,
    loss,
    loss_and_grad,
    mlp_forward,
    mlp_train_local,
    param_count,
    predict,
    softmax,
    weighted_param_mean,
)
from .rng import RngStream, derive_seed, hash_parts, mix64, splitmix64_next

__all__ = [
    "ConfigurationError",
    "MlpModel",
    "NumericInstabilityError",
    "RngStream",
    "accuracy",
    "as_matrix",
    "derive_seed",
    "hash_parts",
    "jacobi_eigh",
    "latents_of",
    "loss",
    "loss_and_grad",
    "mix64",
    "mlp_forward",
    "mlp_train_local",
    "param_count",
    "predict",
    "softmax",
    "splitmix64_next",
    "sym_sqrt",
    "weighted_param_mean",
]
