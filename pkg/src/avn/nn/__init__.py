from .functional import (bce_loss, birnn_forward, dice_loss, init_birnn, init_mha,
                         linear_forward, masked_cross_entropy, multihead_attention,
                         scaled_dot_attention, softmax_rows)
from .gradcheck import gradient_check
from .optim import adamw_step
from .params import MHAConfig, ParamStore, glorot, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, no_grad

__all__ = [
    "MHAConfig", "ParamStore", "Tensor", "adamw_step", "backward", "bce_loss", "birnn_forward",
    "dice_loss", "glorot", "gradient_check", "init_birnn", "init_mha", "linear_forward",
    "load_checkpoint", "masked_cross_entropy", "multihead_attention", "no_grad", "save_checkpoint",
    "scaled_dot_attention", "softmax_rows",
]
