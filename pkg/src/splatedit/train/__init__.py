from .evalsuite import eval_suite
from .loop import (TrainConfig, latents_from_asset, load_config,
                   pretrain_lrm, save_config, smoke_stage1_config,
                   train_stage1, train_stage2)
from .metrics import psnr, recon_loss, ssim, ssim_window
from .optim import AdamW, cosine_lr
from .tasks import (TASK_KINDS, EditTaskSample, directional_shade,
                    graffiti_sample, hue_rotate, paint_stroke, recolor_sample,
                    sample_task, shade_field, stroke_mask, stroke_points,
                    zoom_crop_sample)

__all__ = [
    "TrainConfig", "save_config", "load_config",
    "recon_loss", "psnr", "ssim", "ssim_window",
    "AdamW", "cosine_lr",
    "EditTaskSample", "TASK_KINDS", "sample_task",
    "recolor_sample", "zoom_crop_sample", "graffiti_sample",
    "hue_rotate", "directional_shade", "shade_field",
    "stroke_points", "stroke_mask", "paint_stroke",
    "pretrain_lrm", "train_stage1", "train_stage2",
    "smoke_stage1_config",
    "latents_from_asset", "eval_suite",
]
