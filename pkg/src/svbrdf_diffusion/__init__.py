"""Prompt-conditioned SVBRDF diffusion at desk scale.

Submodules: ``numerics`` (tensors and reverse-mode autodiff), ``svbrdf``
(map model, codec, tiling, files), ``renderer``, ``diffusion``, ``unet``,
``dataset``, ``trainer``, ``estimator`` and ``cli``.
"""

from .dataset import PromptSpec, build_dataset, generate_sample, make_latent, parse_prompt
from .diffusion import NoiseSchedule, euler_sample, forward_diffuse, v_target
from .estimator import SeamlessTiler, SvbrdfDiffusion, SvbrdfEncoder
from .renderer import RenderConfig, render
from .svbrdf import SvbrdfMaps, decode, encode, extract_scalars, read_svb, tile, write_svb
from .trainer import TrainConfig, eval_conditioning, train
from .unet import Condition, UNetConfig, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Condition",
    "NoiseSchedule",
    "PromptSpec",
    "RenderConfig",
    "SeamlessTiler",
    "SvbrdfDiffusion",
    "SvbrdfEncoder",
    "SvbrdfMaps",
    "TrainConfig",
    "UNetConfig",
    "build_dataset",
    "decode",
    "encode",
    "euler_sample",
    "eval_conditioning",
    "extract_scalars",
    "forward_diffuse",
    "generate_sample",
    "init_params",
    "load_checkpoint",
    "make_latent",
    "parse_prompt",
    "read_svb",
    "render",
    "save_checkpoint",
    "tile",
    "train",
    "v_target",
    "write_svb",
]
