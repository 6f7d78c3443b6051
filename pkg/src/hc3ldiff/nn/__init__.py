from .blocks import ResBlock, TimeMLP
from .gradcheck import check_module, numerical_gradient, relative_error
from .layers import (
    ChannelConcat,
    Conv2d,
    Dense,
    GroupNorm,
    Module,
    ResidualAdd,
    SiLU,
    Tanh,
    TimeEmbedInject,
    Upsample2x,
    sinusoidal_embedding,
    time_embedding,
)
from .optim import AdamW, adamw_update

__all__ = [
    "AdamW",
    "ChannelConcat",
    "Conv2d",
    "Dense",
    "GroupNorm",
    "Module",
    "ResBlock",
    "ResidualAdd",
    "SiLU",
    "Tanh",
    "TimeEmbedInject",
    "TimeMLP",
    "Upsample2x",
    "adamw_update",
    "check_module",
    "numerical_gradient",
    "relative_error",
    "sinusoidal_embedding",
    "time_embedding",
]
