from .kernels import BACKEND
from .layers import (
    Conv2d,
    NiN,
    ReLU,
    MaxPool2x2,
    FullyConnected,
    Softmax,
    ConcatChannels,
    RoIPool,
    Sequential,
    conv2d,
    concat_channels,
    roi_pool,
)
from .gradcheck import grad_check
from .optim import sgd_step, MomentumSGD
