from msfin.nn.module import Initializer, Module
from msfin.tensor import Tensor, conv2d, conv_transpose2d


def conv_param_count(c_in: int, c_out: int, kernel: int, groups: int = 1) -> int:
    """C_out * (C_in / groups) * k^2 + C_out."""
    return c_out * (c_in // groups) * kernel * kernel + c_out


def conv_transpose_param_count(c_in: int, c_out: int, kernel: int) -> int:
    return c_in * c_out * kernel * kernel + c_out


class Conv2d(Module):
    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, kernel: int, init: Initializer,
                 stride: int = 1, padding: int = 0, groups: int = 1):
        super().__init__()
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = init.normal((c_out, c_in // groups, kernel, kernel), fan_in, "weight")
        self.bias = init.zeros((1, c_out, 1, 1), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def param_count(self) -> int:
        return conv_param_count(self.c_in, self.c_out, self.kernel, self.groups)


class ConvTranspose2d(Module):
    """Stride-2 transposed convolution (k=4, p=1 doubles the spatial extent)."""

    kind = "conv_transpose2d"

    def __init__(self, c_in: int, c_out: int, init: Initializer,
                 kernel: int = 4, stride: int = 2, padding: int = 1):
        super().__init__()
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        self.weight = init.normal((c_in, c_out, kernel, kernel), c_out * kernel * kernel, "weight")
        self.bias = init.zeros((1, c_out, 1, 1), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def param_count(self) -> int:
        return conv_transpose_param_count(self.c_in, self.c_out, self.kernel)
