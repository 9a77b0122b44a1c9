from msfin.tensor.tensor import (
    DType,
    Function,
    GradientMap,
    Parameter,
    Tape,
    Tensor,
    active_tape,
    backward,
    no_grad,
)
from msfin.tensor.functional import (
    add,
    add_all,
    channel_shuffle,
    concat_channels,
    conv2d,
    conv_transpose2d,
    crop,
    global_avg_pool,
    l1_loss,
    leaky_relu,
    mean_all,
    mul,
    pad_to_multiple,
    pixel_shuffle,
    reflect_pad,
    relu,
    scale,
    sigmoid,
    sum_all,
)
