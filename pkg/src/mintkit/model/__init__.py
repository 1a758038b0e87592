from . import checkpoint, lens
from .config import ConfigError, MiniModelConfig, donut_base_config
from .ids import HeadId, MaskSet, SublayerId, parse_site, site, sublayers
from .network import (
    ActivationTrace,
    MiniModel,
    PatchError,
    SublayerArch,
    build_model,
    decode_teacher_forced,
    decode_with_patch,
    encode,
    generate,
)

__all__ = [
    "ActivationTrace",
    "ConfigError",
    "HeadId",
    "MaskSet",
    "MiniModel",
    "MiniModelConfig",
    "PatchError",
    "SublayerArch",
    "SublayerId",
    "build_model",
    "checkpoint",
    "decode_teacher_forced",
    "decode_with_patch",
    "donut_base_config",
    "encode",
    "generate",
    "lens",
    "parse_site",
    "site",
    "sublayers",
]
