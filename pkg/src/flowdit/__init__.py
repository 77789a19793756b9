"""flowdit: diffusion-transformer reconstruction of 3D voxel flow fields from 2D slices."""

from .tensor import Tensor, Tape, ShapeError, grad_check
from .planes import (PlaneSpec, PlaneSlice, normalize_plane, extract_axis_slice,
                     pad_slices_to_volume, fourier_pe, build_plane_embedding)
from .attention import (TokenGrid, AttentionParams, global_attention, window_attention,
                        plane_attention, cross_attention, attention_flops)
from .model import ModelConfig, FlowDiT, adaln_modulate, residual_scale, positional_embedding_3d
from .diffusion import DiffusionSchedule, make_schedule, q_sample, training_loss, ddpm_sample
from .flowgen import (VoxelField, FlowDataset, taylor_green, abc_flow, random_solenoidal,
                      write_dataset, read_dataset, import_raw)
from .metrics import MetricReport, nrmse, psnr, ssim3d, per_plane_profile, evaluate
from .trainer import TrainConfig, TrainState, PlanePolicy, adamw_step, cosine_lr, train

__all__ = [
    "Tensor", "Tape", "ShapeError", "grad_check",
    "PlaneSpec", "PlaneSlice", "normalize_plane", "extract_axis_slice",
    "pad_slices_to_volume", "fourier_pe", "build_plane_embedding",
    "TokenGrid", "AttentionParams", "global_attention", "window_attention",
    "plane_attention", "cross_attention", "attention_flops",
    "ModelConfig", "FlowDiT", "adaln_modulate", "residual_scale", "positional_embedding_3d",
    "DiffusionSchedule", "make_schedule", "q_sample", "training_loss", "ddpm_sample",
    "VoxelField", "FlowDataset", "taylor_green", "abc_flow", "random_solenoidal",
    "write_dataset", "read_dataset", "import_raw",
    "MetricReport", "nrmse", "psnr", "ssim3d", "per_plane_profile", "evaluate",
    "TrainConfig", "TrainState", "PlanePolicy", "adamw_step", "cosine_lr", "train",
]

__version__ = "0.1.0"
