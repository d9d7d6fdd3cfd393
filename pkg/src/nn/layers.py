from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.nn import tensor as F
from src.nn.tensor import Tensor
from src.utils.errors import ShapeError


class Module:
    """Base for layers and models; parameters are discovered from attributes in definition order."""
    kind = "module"

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs) -> Tensor:
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs) -> Tensor:
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = []
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out.append((full, value))
            else:
                out.extend(value.named_parameters(prefix=f"{full}."))
        return out

    def named_modules(self, prefix: str = "") -> List[Tuple[str, "Module"]]:
        out = [(prefix.rstrip("."), self)]
        for name, value in self._children():
            if isinstance(value, Module):
                out.extend(value.named_modules(prefix=f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter; float64 is used for gradient checks."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ShapeError(f"State mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != parameter shape {p.data.shape}")
            p.data = state[name].astype(p.data.dtype).copy()

    def describe(self) -> Dict:
        return {"kind": self.kind}


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32), requires_grad=True)


class Conv2d(Module):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 name: str = "conv2d"):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ShapeError(f"{name}: kernel size must be odd for same padding, got {kernel_size}")
        self.name = name
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        self.weight = _he_normal(rng, (kernel_size, kernel_size, in_channels, out_channels),
                                 kernel_size * kernel_size * in_channels)
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (N, H, W, {self.in_channels}) input, got {x.shape}")
        return F.Conv2d.apply(x, self.weight, self.bias)

    def describe(self) -> Dict:
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels, "k": self.kernel_size}


class Dense(Module):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 zero_init: bool = False, name: str = "dense"):
        super().__init__()
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        if zero_init:
            self.weight = Tensor(np.zeros((in_features, out_features), dtype=np.float32), requires_grad=True)
        else:
            self.weight = _he_normal(rng, (in_features, out_features), in_features)
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.name}: expected {self.in_features} input features, got shape {x.shape}")
        return x @ self.weight + self.bias

    def describe(self) -> Dict:
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class ReLU(Module):
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        return x.relu()


class Softmax(Module):
    kind = "softmax"

    def forward(self, x: Tensor) -> Tensor:
        return x.softmax()


class MaxPool2(Module):
    kind = "maxpool2"

    def __init__(self, name: str = "maxpool2"):
        super().__init__()
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(f"{self.name}: spatial dims must be even, got {x.shape}")
        return F.MaxPool2.apply(x)


class Upsample2(Module):
    kind = "upsample2"

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"upsample2: expected an NHWC tensor, got {x.shape}")
        return F.Upsample2.apply(x)


class Dropout(Module):
    kind = "dropout"

    def __init__(self, p: float, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.p, self.rng, self.training)

    def describe(self) -> Dict:
        return {"kind": self.kind, "p": self.p}


class LayerNorm(Module):
    kind = "layernorm"

    def __init__(self, features: int, eps: float = 1e-5, name: str = "layernorm"):
        super().__init__()
        self.name = name
        self.features, self.eps = features, eps
        self.gain = Tensor(np.ones(features, dtype=np.float32), requires_grad=True)
        self.offset = Tensor(np.zeros(features, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.features:
            raise ShapeError(f"{self.name}: expected {self.features} features, got shape {x.shape}")
        return F.LayerNormalize.apply(x, eps=self.eps) * self.gain + self.offset

    def describe(self) -> Dict:
        return {"kind": self.kind, "features": self.features}
