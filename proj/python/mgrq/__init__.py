"""Mixed granularity quantization for a small vision transformer.

Thin wrapper over the native module; everything lives in C++ and this
package just re-exports it.
"""

from ._core import (
    AblationConfig,
    AblationReport,
    AblationRow,
    DataError,
    Dataset,
    LossBreakdown,
    LossLogRow,
    ModelConfig,
    NumericalError,
    QuantParams,
    QuantizedTensor,
    ReconstructionConfig,
    Split,
    TrainConfig,
    ViTModel,
    ablation_csv,
    calibrate,
    calibrate_per_channel,
    dequantize,
    ebgs_loss,
    evaluate_top1,
    fake_quant,
    fuse_losses,
    init_model,
    load_checkpoint,
    load_dataset,
    model_forward,
    obwr_loss,
    quantize,
    reconstruct_block,
    run_ablation,
    run_mgrq,
    sample_calibration,
    save_checkpoint,
    save_dataset,
    toy_dataset,
    train_toy_fp,
)

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "AblationReport",
    "AblationRow",
    "DataError",
    "Dataset",
    "LossBreakdown",
    "LossLogRow",
    "ModelConfig",
    "NumericalError",
    "QuantParams",
    "QuantizedTensor",
    "ReconstructionConfig",
    "Split",
    "TrainConfig",
    "ViTModel",
    "ablation_csv",
    "calibrate",
    "calibrate_per_channel",
    "dequantize",
    "ebgs_loss",
    "evaluate_top1",
    "fake_quant",
    "fuse_losses",
    "init_model",
    "load_checkpoint",
    "load_dataset",
    "model_forward",
    "obwr_loss",
    "quantize",
    "reconstruct_block",
    "run_ablation",
    "run_mgrq",
    "sample_calibration",
    "save_checkpoint",
    "save_dataset",
    "toy_dataset",
    "train_toy_fp",
]
