"""
Custom operators used by the fusion networks.

Feature maps follow the torch convention ``(batch, channels, height, width)``.
Every operator is an ``nn.Module`` or ``autograd.Function`` so it can be
gradient-checked on its own in double precision.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InputError

CBAM_RATIO = 8
SPATIAL_KERNEL = 7
SKETCH_DIM = 1024


class ChannelAttention(nn.Module):
    """``sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))`` with one MLP shared by both pools."""

    def __init__(self, channels: int, ratio: int = CBAM_RATIO) -> None:
        super().__init__()
        if ratio < 1 or channels % ratio:
            raise ConfigurationError(f"{channels} channels are not divisible by reduction ratio {ratio}")
        hidden = channels // ratio
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Channel weights of shape ``(batch, channels)``, each in (0, 1)."""
        avg = x.mean(dim=(2, 3))
        peak = x.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(peak))


class SpatialAttention(nn.Module):
    """``sigmoid(conv(concat(mean_c(x), max_c(x))))`` with same padding."""

    def __init__(self, kernel_size: int = SPATIAL_KERNEL) -> None:
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigurationError(f"Spatial attention kernel must be odd and positive, got {kernel_size}")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Spatial weights of shape ``(batch, height, width)``, each in (0, 1)."""
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled)).squeeze(1)


class CBAM(nn.Module):
    """Channel attention followed by spatial attention; the output keeps the input shape."""

    def __init__(self, channels: int, ratio: int = CBAM_RATIO, kernel_size: int = SPATIAL_KERNEL) -> None:
        super().__init__()
        self.channel = ChannelAttention(channels, ratio)
        self.spatial = SpatialAttention(kernel_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x * self.channel(x)[:, :, None, None]
        return x * self.spatial(x)[:, None, :, :]


@dataclass(frozen=True, eq=False)
class SketchParams:
    """Count-sketch hashes ``h`` (index -> bucket) and signs ``s`` for both inputs, frozen at construction."""

    d: int
    h1: np.ndarray
    s1: np.ndarray
    h2: np.ndarray
    s2: np.ndarray
    seed: int

    @classmethod
    def draw(cls, n1: int, n2: int, d: int, seed: int) -> "SketchParams":
        if d < 1:
            raise ConfigurationError(f"Sketch dimension must be positive, got {d}")
        rng = np.random.default_rng(seed)
        return cls(
            d=d,
            h1=rng.integers(d, size=n1),
            s1=rng.choice(np.array([-1, 1]), size=n1),
            h2=rng.integers(d, size=n2),
            s2=rng.choice(np.array([-1, 1]), size=n2),
            seed=seed,
        )


def count_sketch(x: torch.Tensor, h: torch.Tensor, s: torch.Tensor, d: int) -> torch.Tensor:
    """Scatter ``s[i] * x[..., i]`` into bucket ``h[i]`` of a length-``d`` vector, adding on collision."""
    out = x.new_zeros((*x.shape[:-1], d))
    return out.index_add(-1, h, x * s.to(x.dtype))


def signed_sqrt(x: torch.Tensor) -> torch.Tensor:
    """``sign(x) * sqrt(|x|)`` with a zero gradient at 0 (empty sketch buckets are common)."""
    magnitude = x.abs()
    nonzero = magnitude > 0
    safe = torch.where(nonzero, magnitude, torch.ones_like(magnitude))
    return torch.where(nonzero, torch.sign(x) * torch.sqrt(safe), torch.zeros_like(x))


def _sketch_convolution(x, y, h1, s1, h2, s2, d: int) -> torch.Tensor:
    fx = torch.fft.rfft(count_sketch(x, h1, s1, d), n=d, dim=-1)
    fy = torch.fft.rfft(count_sketch(y, h2, s2, d), n=d, dim=-1)
    return torch.fft.irfft(fx * fy, n=d, dim=-1)


class CompactBilinearPooling(nn.Module):
    """
    Count-sketch approximation of the flattened outer product ``x ⊗ y``.

    The two sketches are circularly convolved through the FFT, then passed
    through a signed square root and L2-normalized over the last axis (a zero
    vector stays zero). Leading axes are batch axes, so per-location pooling
    of feature maps works on channel-last tensors.
    """

    def __init__(self, n1: int, n2: int, d: int = SKETCH_DIM, seed: int = 0, normalize: bool = True) -> None:
        super().__init__()
        params = SketchParams.draw(n1, n2, d, seed)
        self.d = d
        self.normalize = normalize
        self.register_buffer("h1", torch.from_numpy(params.h1).long())
        self.register_buffer("s1", torch.from_numpy(params.s1).to(torch.float32))
        self.register_buffer("h2", torch.from_numpy(params.h2).long())
        self.register_buffer("s2", torch.from_numpy(params.s2).to(torch.float32))

    def raw(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.h1.shape[0] or y.shape[-1] != self.h2.shape[0]:
            raise InputError(
                f"Expected trailing sizes {self.h1.shape[0]} and {self.h2.shape[0]}, got {x.shape[-1]} and {y.shape[-1]}"
            )
        return _sketch_convolution(x, y, self.h1, self.s1, self.h2, self.s2, self.d)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        phi = self.raw(x, y)
        return F.normalize(signed_sqrt(phi), p=2.0, dim=-1) if self.normalize else phi


def compact_bilinear_pool(x: torch.Tensor, y: torch.Tensor, params: SketchParams, normalize: bool = True) -> torch.Tensor:
    """Functional form of :class:`CompactBilinearPooling` for explicitly supplied sketch parameters."""
    if params.d < 1:
        raise ConfigurationError(f"Sketch dimension must be positive, got {params.d}")
    h1, h2 = torch.as_tensor(params.h1, dtype=torch.long), torch.as_tensor(params.h2, dtype=torch.long)
    s1, s2 = torch.as_tensor(params.s1), torch.as_tensor(params.s2)
    phi = _sketch_convolution(x, y, h1, s1, h2, s2, params.d)
    return F.normalize(signed_sqrt(phi), p=2.0, dim=-1) if normalize else phi


def _doublings(source: int, target: int) -> int:
    if source < 1:
        return -1
    steps = 0
    size = source
    while size < target:
        size *= 2
        steps += 1
    return steps if size == target else -1


class Deconv1dTo2d(nn.Module):
    """
    Lift a flat vector to a feature map.

    The vector is reshaped to the seed grid ``(c0, h0, w0)`` and grown by
    stride-2, kernel-4 transposed convolutions (each exactly doubles height
    and width) until it reaches ``(height, width)`` with ``channels`` outputs.
    """

    def __init__(self, seed_grid: tuple[int, int, int], target: tuple[int, int, int]) -> None:
        super().__init__()
        c0, h0, w0 = seed_grid
        height, width, channels = target
        steps = _doublings(h0, height)
        if steps < 1 or steps != _doublings(w0, width):
            raise ConfigurationError(f"{height}x{width} is not reachable by doubling a {h0}x{w0} seed grid")
        self.seed_grid = seed_grid

        layers: list[nn.Module] = []
        in_channels = c0
        for step in range(steps):
            layers.append(nn.ConvTranspose2d(in_channels, channels, kernel_size=4, stride=2, padding=1))
            if step < steps - 1:
                layers.append(nn.ReLU())
            in_channels = channels
        self.layers = nn.Sequential(*layers)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        c0, h0, w0 = self.seed_grid
        if v.shape[-1] != c0 * h0 * w0:
            raise InputError(f"Vector of length {v.shape[-1]} does not fill a {c0}x{h0}x{w0} seed grid")
        return self.layers(v.reshape(-1, c0, h0, w0))


class _SignSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, t: torch.Tensor) -> torch.Tensor:
        ctx.save_for_backward(t)
        return torch.where(t >= 0, torch.ones_like(t), -torch.ones_like(t))

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor) -> torch.Tensor:
        (t,) = ctx.saved_tensors
        return grad_output * (t.abs() <= 1).to(grad_output.dtype)


def binarize(t: torch.Tensor) -> torch.Tensor:
    """``sign(t)`` with ``sign(0) = +1``; the gradient passes straight through where ``|t| <= 1``."""
    return _SignSTE.apply(t)


class BinaryLinear(nn.Linear):
    """Dense layer whose weights and inputs are binarized in the forward pass."""

    binary = True

    def binary_weight(self) -> torch.Tensor:
        return binarize(self.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(binarize(x), self.binary_weight(), self.bias)


class BinaryConv2d(nn.Conv2d):
    """Convolution whose weights and inputs are binarized in the forward pass."""

    binary = True

    def binary_weight(self) -> torch.Tensor:
        return binarize(self.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(binarize(x), self.binary_weight(), self.bias)
