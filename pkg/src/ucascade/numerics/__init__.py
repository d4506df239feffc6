from .gradcheck import check_layer, grad_check, numeric_grad, relative_error
from .layers import Conv, Dense, Dropout, Flatten, Layer, MaxPool, ReLU, Sequential, Upsample
from .ops import (
    conv2d_forward,
    conv3d_forward,
    dense,
    dropout,
    max_pool,
    sigmoid,
    sigmoid_bce_loss,
    upsample_nn,
)
from .optim import OptimState, optimizer_step
from .tensor import as_tensor, derive_seed, make_rng, split_rngs
