from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from msfin.core.exceptions import ShapeError
from msfin.tensor import DType, Parameter


class Module:
    """Container of named parameters and child modules.

    Attributes holding a Parameter or a Module are registered on assignment, in order,
    so parameter names and initialization order follow construction order.
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        """Depth-first, self first; a module shared under two names is yielded once."""
        seen = set()
        stack = [(prefix.rstrip("."), self)]
        while stack:
            name, module = stack.pop()
            if id(module) in seen:
                continue
            seen.add(id(module))
            yield name, module
            children = [(f"{name}.{child_name}" if name else child_name, child)
                        for child_name, child in module._modules.items()]
            stack.extend(reversed(children))

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        """Every parameter once, under the first name it is reachable by."""
        seen = set()
        named: List[Tuple[str, Parameter]] = []
        for name, param in self._walk(prefix):
            if id(param) in seen:
                continue
            seen.add(id(param))
            named.append((name, param))
        return named

    def _walk(self, prefix: str) -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield f"{prefix}{name}", param
        for name, child in self._modules.items():
            yield from child._walk(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def dtype(self) -> DType:
        params = self.parameters()
        return params[0].dtype if params else DType.FLOAT32

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Assign named tensors; shape mismatches and (when strict) missing/extra names fail."""
        own = OrderedDict(self.named_parameters())
        if strict:
            missing = [name for name in own if name not in state]
            unexpected = [name for name in state if name not in own]
            if missing or unexpected:
                raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name in own:
                own[name].assign(value)


class ModuleList(Module):
    """Indexable sequence of modules registered as '0', '1', ..."""

    def __init__(self, modules: Optional[Sequence[Module]] = None):
        super().__init__()
        self._items: List[Module] = []
        for module in modules or []:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)


class Initializer:
    """Seeded source of initial weights: N(0, 1/fan_in) for weights, zeros for biases."""

    def __init__(self, seed: int = 0, dtype: DType = DType.FLOAT32):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.dtype = dtype

    def normal(self, shape: Tuple[int, ...], fan_in: int, name: str) -> Parameter:
        data = self.rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)
        return Parameter(data, name=name, dtype=self.dtype)

    def zeros(self, shape: Tuple[int, ...], name: str) -> Parameter:
        return Parameter(np.zeros(shape), name=name, dtype=self.dtype)


def sync_parameter_names(module: Module) -> None:
    """Stamp each parameter with its dotted path inside `module`."""
    for name, param in module.named_parameters():
        param.name = name

