from .layers import LayerSpec, batchnorm, conv, dense, dt_fixed, leaky, maxpool, sigmoid, tconv, upsample
from .net import Net, fold_batchnorm, load_checkpoint, save_checkpoint
from .optim import SGD, LrSchedule, sgd_step

__all__ = ["LayerSpec", "Net", "SGD", "LrSchedule", "sgd_step", "fold_batchnorm", "save_checkpoint",
           "load_checkpoint", "conv", "tconv", "maxpool", "upsample", "leaky", "batchnorm", "sigmoid",
           "dense", "dt_fixed"]
