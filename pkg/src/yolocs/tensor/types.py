from dataclasses import dataclass, field

import numpy as np

from yolocs.errors import DimensionMismatchError

DEFAULT_DTYPE = np.float32
ALLOWED_KERNELS = (1, 3, 5, 6)
ALLOWED_STRIDES = (1, 2)

BN_EPS = 1e-3
BN_MOMENTUM = 0.03


def check_tensor4(x: np.ndarray, name: str = "input") -> np.ndarray:
    """Validate a rank-4 (n, c, h, w) feature map and return it C-contiguous."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise DimensionMismatchError(f"{name} must be a rank-4 array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise DimensionMismatchError(f"{name} has an empty dimension: {x.shape}")
    return np.ascontiguousarray(x)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int | None = None
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel_size not in ALLOWED_KERNELS:
            raise ValueError(f"kernel side must be one of {ALLOWED_KERNELS}, got {self.kernel_size}")
        if self.stride not in ALLOWED_STRIDES:
            raise ValueError(f"stride must be one of {ALLOWED_STRIDES}, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel_size // 2)
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)


@dataclass
class ConvParams:
    weights: np.ndarray
    bias: np.ndarray | None = None

    def check(self, spec: ConvSpec, layer: str | None = None) -> None:
        if self.weights.shape != spec.weight_shape():
            raise DimensionMismatchError(
                f"weights shape {self.weights.shape} != {spec.weight_shape()}", layer)
        if spec.has_bias:
            if self.bias is None or self.bias.shape != (spec.out_channels,):
                raise DimensionMismatchError(f"bias must have shape ({spec.out_channels},)", layer)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels: int, dtype=DEFAULT_DTYPE, **kwargs) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kwargs,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __post_init__(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ValueError(f"{name} must have length {c}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
