"""Python bindings for the mikecoco re-identification core."""

from ._core import (
    RuntimeFailure,
    ValidationError,
    band_pass_mask,
    dct2,
    evaluate,
    evaluate_checkpoint,
    extract_dii,
    idct2,
    lr_schedule,
    make_spi,
    run_cli,
    synth_dataset,
    train_stage1,
    train_stage2,
)

__all__ = [
    "RuntimeFailure",
    "ValidationError",
    "band_pass_mask",
    "dct2",
    "evaluate",
    "evaluate_checkpoint",
    "extract_dii",
    "idct2",
    "lr_schedule",
    "make_spi",
    "run_cli",
    "synth_dataset",
    "train_stage1",
    "train_stage2",
]
