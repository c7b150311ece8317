"""Fundus photo enhancement with a direct diffusion bridge."""

__version__ = "0.1.0"

from .bridge import (  # noqa: E402
    BridgeConfig, TimestepSchedule, bridge_state, ddb_step, sample, training_loss, uniform_schedule,
)
from .degradation import (  # noqa: E402
    DegradationParams, ParamRanges, degrade, make_training_pair, sample_params,
)
from .imaging import ClaheParams, center_crop_resize, clahe, load_image, save_image  # noqa: E402
from .metrics import MetricReport, evaluate, fid_gaussian, iou, psnr  # noqa: E402

__all__ = [
    "BridgeConfig", "TimestepSchedule", "bridge_state", "ddb_step", "sample", "training_loss",
    "uniform_schedule", "DegradationParams", "ParamRanges", "degrade", "make_training_pair",
    "sample_params", "ClaheParams", "center_crop_resize", "clahe", "load_image", "save_image",
    "MetricReport", "evaluate", "fid_gaussian", "iou", "psnr",
]
