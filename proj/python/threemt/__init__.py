"""Multi-modal mixing transformer: C++ core exposed through pybind11."""

from ._threemt import (
    ConfigError,
    ContractError,
    FormatError,
    InputError,
    NumericError,
    ShapeError,
    StateError,
    auc,
    binary_metrics,
    config_keys,
    confusion,
    evaluate,
    gradcheck,
    load_volume,
    preset_names,
    roc_curve,
    scaled_dot_attention,
    sweep,
    synth,
    train,
    write_volume,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "FormatError",
    "InputError",
    "NumericError",
    "ShapeError",
    "StateError",
    "auc",
    "binary_metrics",
    "config_keys",
    "confusion",
    "evaluate",
    "gradcheck",
    "load_volume",
    "preset_names",
    "roc_curve",
    "scaled_dot_attention",
    "sweep",
    "synth",
    "train",
    "write_volume",
]
