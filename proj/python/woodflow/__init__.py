"""Woodbury and ME-Woodbury normalizing flows.

Arrays are NumPy, batches are (N, C, H, W). Image datasets are uint8 and get
dequantized to [0, 1); float datasets are used as they are.
"""

from ._woodflow import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    Error,
    FlowConfig,
    FlowModel,
    FormatError,
    IoError,
    NumericalError,
    RunConfig,
    SingularMatrixError,
    Trainer,
    ntf_read,
    ntf_write,
    parse_run_config,
    selfcheck,
    synth_gaussian_2d,
    synth_gaussian_mixture,
    woodbury_identity_check,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "Error",
    "FlowConfig",
    "FlowModel",
    "FormatError",
    "IoError",
    "NumericalError",
    "RunConfig",
    "SingularMatrixError",
    "Trainer",
    "ntf_read",
    "ntf_write",
    "parse_run_config",
    "selfcheck",
    "synth_gaussian_2d",
    "synth_gaussian_mixture",
    "woodbury_identity_check",
]
