"""Dense (N, C, H, W) tensors with reverse-mode differentiation over a recorded tape."""
from contextlib import contextmanager
from contextvars import ContextVar
from enum import Enum
import itertools
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Type, Union

import numpy as np

from msfin.core.exceptions import ShapeError, TapeError


class DType(str, Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(self.value)

    @property
    def tag(self) -> int:
        """Checkpoint dtype tag."""
        return 0 if self is DType.FLOAT32 else 1

    @classmethod
    def from_tag(cls, tag: int) -> "DType":
        if tag == 0:
            return cls.FLOAT32
        if tag == 1:
            return cls.FLOAT64
        raise ValueError(f"Unknown dtype tag {tag}")

    @classmethod
    def of(cls, array: np.ndarray) -> "DType":
        return cls(np.dtype(array.dtype).name)


ArrayLike = Union[np.ndarray, Sequence, float]


class Tensor:
    """Immutable 4-D array; participates in the active tape when requires_grad is set."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[DType] = None):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype.numpy, copy=False)
        elif array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        if array.ndim != 4:
            raise ShapeError(f"Tensor must be 4-D (N, C, H, W), got shape {array.shape}")
        self.data = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        # (tape serial, record index) when produced by a recorded operation
        self.node_id: Optional[Tuple[int, int]] = None

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> DType:
        return DType.of(self.data)

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        from msfin.tensor.functional import add
        return add(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from msfin.tensor.functional import mul, scale
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other: "Tensor") -> "Tensor":
        from msfin.tensor.functional import add, scale
        return add(self, scale(other, -1.0))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named trainable tensor with accumulated gradient and Adam moment slots."""

    __slots__ = ("name", "exp_avg", "exp_avg_sq")

    def __init__(self, data: ArrayLike, name: str = "", dtype: Optional[DType] = None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.exp_avg: Optional[np.ndarray] = None
        self.exp_avg_sq: Optional[np.ndarray] = None

    def assign(self, value: np.ndarray) -> None:
        """Replace the parameter value between steps (shape and dtype preserved)."""
        value = np.asarray(value)
        if value.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {value.shape} to {self.data.shape}")
        self.data = np.ascontiguousarray(value, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, dtype={self.dtype.value})"


class Context:
    """Per-operation scratch space shared between forward and backward."""

    def __init__(self):
        self.saved: Tuple[Any, ...] = ()

    def save_for_backward(self, *values: Any) -> None:
        self.saved = values


class TapeRecord:
    __slots__ = ("function", "ctx", "inputs", "output_id")

    def __init__(self, function: Type["Function"], ctx: Context, inputs: Tuple[Tensor, ...], output_id: Tuple[int, int]):
        self.function = function
        self.ctx = ctx
        self.inputs = inputs
        self.output_id = output_id


_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("msfin_active_tape", default=None)
_TAPE_SERIAL = itertools.count()

GradientMap = Dict[Tensor, np.ndarray]


class Tape:
    """Ordered record of differentiable operations; single writer."""

    def __init__(self):
        self.serial = next(_TAPE_SERIAL)
        self.records: List[TapeRecord] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, function: Type["Function"], ctx: Context, inputs: Tuple[Tensor, ...], output: Tensor) -> None:
        node_id = (self.serial, len(self.records))
        self.records.append(TapeRecord(function, ctx, inputs, node_id))
        output.node_id = node_id
        output.requires_grad = True

    def backward(self, loss: Tensor) -> GradientMap:
        """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad."""
        if loss.shape != (1, 1, 1, 1):
            raise TapeError(f"backward() needs a scalar-shaped (1,1,1,1) loss, got {loss.shape}")
        if loss.node_id is None or loss.node_id[0] != self.serial:
            raise TapeError("loss was not recorded on this tape")

        grads: Dict[Tuple[int, int], np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        touched: Dict[int, Tensor] = {}
        last = loss.node_id[1]
        for record in reversed(self.records[: last + 1]):
            upstream = grads.pop(record.output_id, None)
            if upstream is None:
                continue
            input_grads = record.function.backward(record.ctx, upstream)
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.node_id is not None and tensor.node_id[0] == self.serial:
                    if tensor.node_id in grads:
                        grads[tensor.node_id] = grads[tensor.node_id] + grad
                    else:
                        grads[tensor.node_id] = grad
                else:
                    if tensor.grad is None:
                        tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True)
                    else:
                        tensor.grad += grad
                    touched[id(tensor)] = tensor
        return {tensor: tensor.grad for tensor in touched.values()}


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> GradientMap:
    """Backpropagate through the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeError("backward() called with no active tape")
    return tape.backward(loss)


class Function:
    """An operator with a numpy forward and an explicit backward rule."""

    @staticmethod
    def forward(ctx: Context, *arrays: np.ndarray, **attrs: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad_output: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **attrs: Any) -> Tensor:
        dtypes = {t.data.dtype for t in inputs}
        if len(dtypes) > 1:
            raise ShapeError(f"{cls.__name__}: mixed element types {sorted(str(d) for d in dtypes)}")
        ctx = Context()
        out = Tensor(cls.forward(ctx, *(t.data for t in inputs), **attrs))
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            tape.record(cls, ctx, tuple(inputs), out)
        return out


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording, e.g. for validation inside a training step."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)
