from .layers import Conv, Dropout, FullyConnected, MaxPool, ReLU, Softmax
from .network import (
    NetworkSpec,
    backward,
    compact_spec,
    forward,
    init_params,
    load_params,
    loss,
    named_spec,
    save_params,
    standard_spec,
    validate_pipeline_spec,
)
from .training import (
    EpochStats,
    TrainConfig,
    average_scale_probs,
    evaluate,
    predict_patches,
    predict_superpixel,
    train_sgd,
    write_trace_csv,
)
from .gradcheck import gradient_check, random_tiny_spec

__all__ = [
    "Conv", "Dropout", "FullyConnected", "MaxPool", "ReLU", "Softmax",
    "NetworkSpec", "backward", "compact_spec", "forward", "init_params",
    "load_params", "loss", "named_spec", "save_params", "standard_spec",
    "validate_pipeline_spec", "EpochStats", "TrainConfig",
    "average_scale_probs", "evaluate", "predict_patches",
    "predict_superpixel", "train_sgd", "write_trace_csv",
    "gradient_check", "random_tiny_spec",
]
