"""
The six audio-visual fusion classifiers.

All of them take ``images`` of shape ``(batch, 64, 64, 3)`` in [0, 1] and
``audio`` of shape ``(batch, 1000)`` and return ``(batch, 5)`` logits over
go / right / left / stop / anomaly.
"""

import math
import os
import pickle
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import torch
from torch import nn

from .audio import FEATURE_DIM
from .dataset import IMAGE_SIZE
from .errors import ConfigurationError, FormatError, InputError
from .labels import N_CLASSES
from .ops import CBAM, CBAM_RATIO, SKETCH_DIM, BinaryConv2d, BinaryLinear, CompactBilinearPooling, Deconv1dTo2d
from .workspace import atomic_output

CHECKPOINT_FORMAT = 1
DROPOUT_P = 0.25


class Architecture(str, Enum):
    BASELINE = "baseline"
    ATTENTION = "attention"
    BLOCK = "block"
    DECONV_CBP = "deconv_cbp"
    XFLOW = "xflow"
    BNN = "bnn"


_DEFAULT_CONV = {
    Architecture.BLOCK: (32, 64),
    Architecture.DECONV_CBP: (32, 64, 64),
}
_DEFAULT_AUDIO = {
    Architecture.DECONV_CBP: (256,),
}


@dataclass(frozen=True)
class ModelSpec:
    """
    Architecture id plus layer widths.

    Widths default to the normative layer tables; they are overridable so
    that tiny variants of the same topology can be built for gradient checks.
    """

    arch: Architecture
    image_size: int = IMAGE_SIZE
    audio_dim: int = FEATURE_DIM
    n_classes: int = N_CLASSES
    dropout_p: float = DROPOUT_P
    conv_channels: tuple[int, ...] = ()
    audio_hidden: tuple[int, ...] = ()
    image_embed: int = 256
    fusion_hidden: int = 128
    cbam_ratio: int = CBAM_RATIO
    sketch_dim: int = SKETCH_DIM
    deconv_seed: tuple[int, int, int] = (16, 4, 4)

    def __post_init__(self) -> None:
        try:
            arch = Architecture(self.arch)
        except ValueError:
            raise ConfigurationError(
                f"Unknown architecture {self.arch!r}; expected one of {[a.value for a in Architecture]}"
            ) from None
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels) or _DEFAULT_CONV.get(arch, (32, 64, 128)))
        object.__setattr__(self, "audio_hidden", tuple(self.audio_hidden) or _DEFAULT_AUDIO.get(arch, (512, 256)))
        object.__setattr__(self, "deconv_seed", tuple(self.deconv_seed))

        if self.n_classes != N_CLASSES:
            raise ConfigurationError(f"n_classes must be {N_CLASSES}, got {self.n_classes}")
        if self.dropout_p != DROPOUT_P:
            raise ConfigurationError(f"dropout_p must be {DROPOUT_P}, got {self.dropout_p}")
        if self.image_size % 2 ** len(self.conv_channels):
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by the {2 ** len(self.conv_channels)}x pooling of "
                f"{len(self.conv_channels)} conv blocks"
            )
        if arch in (Architecture.XFLOW, Architecture.DECONV_CBP):
            lifted = self.audio_hidden[1 if arch is Architecture.XFLOW else -1]
            if math.prod(self.deconv_seed) != lifted:
                raise ConfigurationError(f"deconv_seed {self.deconv_seed} does not hold the {lifted}-wide audio vector")

    @property
    def feature_side(self) -> int:
        """Height and width of the last image feature map."""
        return self.image_size // 2 ** len(self.conv_channels)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["arch"] = self.arch.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelSpec":
        return cls(**data)


def _activation(binary: bool) -> nn.Module:
    # sign() of a ReLU output is constant, so binarized layers are fed through hardtanh
    return nn.Hardtanh() if binary else nn.ReLU()


class ConvBlock(nn.Sequential):
    """3×3 conv, batch norm, activation, 2×2 max pool, dropout."""

    def __init__(self, in_channels: int, out_channels: int, dropout: float, binary_weights: bool, binary_net: bool) -> None:
        conv = BinaryConv2d if binary_weights else nn.Conv2d
        super().__init__(
            conv(in_channels, out_channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_channels),
            _activation(binary_net),
            nn.MaxPool2d(2),
            nn.Dropout(dropout),
        )


class DenseBlock(nn.Sequential):
    """Dense layer, batch norm, activation, dropout."""

    def __init__(self, in_features: int, out_features: int, dropout: float, binary: bool = False) -> None:
        linear = BinaryLinear if binary else nn.Linear
        super().__init__(
            linear(in_features, out_features),
            nn.BatchNorm1d(out_features),
            _activation(binary),
            nn.Dropout(dropout),
        )


class CrossConnection(nn.Module):
    """Residual exchange between an image feature map and an audio vector."""

    def __init__(self, channels: int, side: int, audio_width: int, seed_grid: tuple[int, int, int]) -> None:
        super().__init__()
        self.to_image = Deconv1dTo2d(seed_grid, (side, side, channels))
        self.to_audio = nn.Linear(channels * side * side, audio_width)

    def forward(self, x: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return x + self.to_image(a), a + self.to_audio(x.flatten(1))


class FusionNet(nn.Module):
    """Common contract: ``embed`` gives the penultimate activations, ``classifier`` maps them to logits."""

    classifier: nn.Linear

    def __init__(self, spec: ModelSpec) -> None:
        super().__init__()
        self.spec = spec

    @property
    def embedding_width(self) -> int:
        return self.classifier.in_features

    def check_inputs(self, images: torch.Tensor, audio: torch.Tensor) -> None:
        side = self.spec.image_size
        if images.ndim != 4 or images.shape[1:] != (side, side, 3):
            raise InputError(f"images must have shape (batch, {side}, {side}, 3), got {tuple(images.shape)}")
        if audio.ndim != 2 or audio.shape[1] != self.spec.audio_dim:
            raise InputError(f"audio must have shape (batch, {self.spec.audio_dim}), got {tuple(audio.shape)}")
        if images.shape[0] != audio.shape[0] or images.shape[0] < 1:
            raise InputError(f"Batch sizes differ or are empty: {images.shape[0]} images, {audio.shape[0]} clips")

    def embed(self, images: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, images: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        self.check_inputs(images, audio)
        return self.classifier(self.embed(images, audio))

    def _image_blocks(self, binary: bool) -> nn.ModuleList:
        blocks, in_channels = [], 3
        for i, channels in enumerate(self.spec.conv_channels):
            # the first conv sees raw pixels and keeps real-valued weights
            blocks.append(
                ConvBlock(in_channels, channels, self.spec.dropout_p, binary_weights=binary and i > 0, binary_net=binary)
            )
            in_channels = channels
        return nn.ModuleList(blocks)

    def _audio_blocks(self, binary: bool) -> nn.ModuleList:
        widths = (self.spec.audio_dim, *self.spec.audio_hidden)
        return nn.ModuleList(DenseBlock(a, b, self.spec.dropout_p, binary) for a, b in zip(widths, widths[1:]))


class ConcatFusionNet(FusionNet):
    """
    Two branches fused by concatenation.

    Covers the baseline, the CBAM variants, the cross-connected variant and
    the binarized variant; they differ only in which optional pieces are
    present, so parameter names line up across them.
    """

    CROSS_AFTER = 1

    def __init__(self, spec: ModelSpec, seed: int = 0) -> None:
        super().__init__(spec)
        binary = spec.arch is Architecture.BNN
        channels = spec.conv_channels

        self.image_blocks = self._image_blocks(binary)
        match spec.arch:
            case Architecture.ATTENTION:
                attend = range(1, len(channels))
            case Architecture.BLOCK:
                attend = range(len(channels) - 1, len(channels))
            case _:
                attend = range(0)
        self.attention = nn.ModuleDict({str(i): CBAM(channels[i], spec.cbam_ratio) for i in attend})

        side = spec.feature_side
        self.image_embed = DenseBlock(channels[-1] * side * side, spec.image_embed, spec.dropout_p, binary)
        self.audio_blocks = self._audio_blocks(binary)

        self.cross: CrossConnection | None = None
        if spec.arch is Architecture.XFLOW:
            i = self.CROSS_AFTER
            cross_side = spec.image_size // 2 ** (i + 1)
            self.cross = CrossConnection(channels[i], cross_side, spec.audio_hidden[i], spec.deconv_seed)

        self.head = DenseBlock(spec.image_embed + spec.audio_hidden[-1], spec.fusion_hidden, spec.dropout_p, binary)
        self.classifier = nn.Linear(spec.fusion_hidden, spec.n_classes)

    def embed(self, images: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        x = images.permute(0, 3, 1, 2)
        a = audio
        for i, block in enumerate(self.image_blocks):
            x = block(x)
            if str(i) in self.attention:
                x = self.attention[str(i)](x)
            if i < len(self.audio_blocks):
                a = self.audio_blocks[i](a)
            if self.cross is not None and i == self.CROSS_AFTER:
                x, a = self.cross(x, a)
        for block in list(self.audio_blocks)[len(self.image_blocks) :]:
            a = block(a)
        x = self.image_embed(x.flatten(1))
        return self.head(torch.cat([x, a], dim=1))


class DeconvCBPFusionNet(FusionNet):
    """Audio lifted to a feature map, fused with the image map by per-location compact bilinear pooling."""

    def __init__(self, spec: ModelSpec, seed: int = 0) -> None:
        super().__init__(spec)
        channels = spec.conv_channels[-1]
        side = spec.feature_side

        self.image_blocks = self._image_blocks(binary=False)
        self.audio_blocks = self._audio_blocks(binary=False)
        self.deconv = Deconv1dTo2d(spec.deconv_seed, (side, side, channels))
        self.deconv_norm = nn.Sequential(nn.BatchNorm2d(channels), nn.ReLU())
        self.pool = CompactBilinearPooling(channels, channels, spec.sketch_dim, seed=seed)
        self.head = DenseBlock(spec.sketch_dim, spec.fusion_hidden, spec.dropout_p)
        self.classifier = nn.Linear(spec.fusion_hidden, spec.n_classes)

    def embed(self, images: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        x = images.permute(0, 3, 1, 2)
        for block in self.image_blocks:
            x = block(x)
        a = audio
        for block in self.audio_blocks:
            a = block(a)
        a = self.deconv_norm(self.deconv(a))
        fused = self.pool(x.permute(0, 2, 3, 1), a.permute(0, 2, 3, 1))
        return self.head(fused.mean(dim=(1, 2)))


ARCHITECTURES: dict[Architecture, type[FusionNet]] = {
    Architecture.BASELINE: ConcatFusionNet,
    Architecture.ATTENTION: ConcatFusionNet,
    Architecture.BLOCK: ConcatFusionNet,
    Architecture.DECONV_CBP: DeconvCBPFusionNet,
    Architecture.XFLOW: ConcatFusionNet,
    Architecture.BNN: ConcatFusionNet,
}


def build_model(spec: ModelSpec, seed: int = 0) -> FusionNet:
    """Construct ``spec`` with He-uniform weights and zero biases drawn deterministically from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ARCHITECTURES[spec.arch](spec, seed)
        for module in model.modules():
            if isinstance(module, nn.Conv2d | nn.ConvTranspose2d | nn.Linear):
                nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
    return model


def forward(model: FusionNet, images: torch.Tensor, audio: torch.Tensor, training: bool = False) -> torch.Tensor:
    """Logits for a batch; with ``training`` off dropout and batch norm run in inference mode and no graph is kept."""
    model.train(training)
    if training:
        return model(images, audio)
    with torch.no_grad():
        return model(images, audio)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass(frozen=True)
class LayerRow:
    name: str
    kind: str
    parameters: int
    storage_bytes: float


def layer_table(model: nn.Module) -> list[LayerRow]:
    """One row per module that owns parameters; binarized weights are stored at one bit each."""
    rows = []
    for name, module in model.named_modules():
        own = dict(module.named_parameters(recurse=False))
        if not own:
            continue
        storage = 0.0
        for pname, param in own.items():
            bits = 1 if pname == "weight" and getattr(module, "binary", False) else 32
            storage += param.numel() * bits / 8
        count = sum(p.numel() for p in own.values())
        rows.append(LayerRow(name=name, kind=type(module).__name__, parameters=count, storage_bytes=storage))
    return rows


def summarize(model: FusionNet) -> str:
    """Text table of layers, parameter counts and storage size."""
    rows = layer_table(model)
    width = max((len(row.name) for row in rows), default=5)
    lines = [f"architecture: {model.spec.arch.value}", f"{'layer':<{width}}  {'type':<16} {'params':>12} {'bytes':>14}"]
    for row in rows:
        lines.append(f"{row.name:<{width}}  {row.kind:<16} {row.parameters:>12,} {row.storage_bytes:>14,.0f}")
    total_bytes = sum(row.storage_bytes for row in rows)
    lines.append(f"{'total':<{width}}  {'':<16} {count_parameters(model):>12,} {total_bytes:>14,.0f}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Checkpoint:
    spec: ModelSpec
    seed: int
    epoch: int | None = None
    fold: int | None = None
    metrics: dict[str, float] = field(default_factory=dict)


def save_checkpoint(path: str | os.PathLike, model: FusionNet, checkpoint: Checkpoint) -> Path:
    """Write parameters, sketch buffers and metadata; the file appears atomically."""
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "spec": checkpoint.spec.to_dict(),
        "seed": checkpoint.seed,
        "epoch": checkpoint.epoch,
        "fold": checkpoint.fold,
        "metrics": dict(checkpoint.metrics),
        "state_dict": model.state_dict(),
    }
    with atomic_output(Path(path)) as tmp:
        torch.save(payload, tmp)
    return Path(path)


def load_checkpoint(path: str | os.PathLike) -> tuple[FusionNet, Checkpoint]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, EOFError, RuntimeError, pickle.UnpicklingError) as e:
        raise FormatError(f"{path}: unreadable checkpoint: {e}") from e
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: checkpoint format {version!r}, expected {CHECKPOINT_FORMAT}")

    spec = ModelSpec.from_dict(payload["spec"])
    model = build_model(spec, payload["seed"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    checkpoint = Checkpoint(
        spec=spec, seed=payload["seed"], epoch=payload["epoch"], fold=payload["fold"], metrics=payload["metrics"]
    )
    return model, checkpoint
