"""Miniature ConvNeXtV2-style teacher network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..autodiff import functional as F
from ..errors import ShapeError
from .layers import (
    GRN,
    Conv2d,
    DepthwiseConv2d,
    DropPath,
    Dropout,
    LayerNorm,
    LayerNorm2d,
    Linear,
    Module,
    Sequential,
)


@dataclass(frozen=True)
class TeacherConfig:
    stage_depths: tuple = (2, 2, 4, 2)
    stage_widths: tuple = (16, 32, 64, 128)
    stem_kernel: int = 4
    stem_stride: int = 4
    expansion_ratio: int = 4
    drop_path_max: float = 0.1
    head_dropout: float = 0.1
    num_classes: int = 3
    in_channels: int = 3
    input_size: int = 32
    block_kernel: int = 7
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if len(self.stage_depths) != 4 or len(self.stage_widths) != 4:
            raise ValueError("teacher needs exactly 4 stage depths and 4 stage widths")
        if any(d < 1 for d in self.stage_depths) or any(w < 1 for w in self.stage_widths):
            raise ValueError("stage depths and widths must be positive")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError(f"stage widths must be nondecreasing, got {self.stage_widths}")
        if not 0.0 <= self.drop_path_max < 1.0 or not 0.0 <= self.head_dropout < 1.0:
            raise ValueError("drop rates must lie in [0, 1)")
        if self.expansion_ratio < 1 or self.num_classes < 2:
            raise ValueError("expansion_ratio must be >= 1 and num_classes >= 2")
        self.feature_sizes()

    def feature_sizes(self) -> list[int]:
        """Spatial size after the stem and after each downsampling step."""
        size = (self.input_size - self.stem_kernel) // self.stem_stride + 1
        if self.input_size < self.stem_kernel or size < 1:
            raise ShapeError(f"stem reduces a {self.input_size}px input to nothing", axis=2)
        sizes = [size]
        for _ in range(3):
            size = (size - 2) // 2 + 1 if size >= 2 else 0
            if size < 1:
                raise ShapeError(
                    f"input size {self.input_size} is too small for 4 stages (spatial size reaches zero)", axis=2
                )
            sizes.append(size)
        return sizes

    def drop_path_rates(self) -> list[float]:
        total = sum(self.stage_depths)
        if total == 1:
            return [self.drop_path_max]
        return [float(r) for r in np.linspace(0.0, self.drop_path_max, total)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["stage_widths"] = list(self.stage_widths)
        return d


class ConvNeXtBlock(Module):
    """dwconv -> LN -> expand -> GELU -> GRN -> reduce, plus a drop-path residual."""

    def __init__(self, dim, expansion, kernel, drop_path, *, rng):
        super().__init__()
        hidden = dim * expansion
        self.dwconv = DepthwiseConv2d(dim, kernel, padding=kernel // 2, rng=rng)
        self.norm = LayerNorm(dim)
        self.pwconv1 = Linear(dim, hidden, rng=rng)
        self.grn = GRN(hidden, channel_axis=-1)
        self.pwconv2 = Linear(hidden, dim, rng=rng)
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        h = self.dwconv(x)
        h = F.transpose(h, (0, 2, 3, 1))
        h = self.norm(h)
        h = F.gelu(self.pwconv1(h))
        h = self.grn(h)
        h = self.pwconv2(h)
        h = F.transpose(h, (0, 3, 1, 2))
        return F.add(x, self.drop_path(h))


class ConvNeXtTeacher(Module):
    kind = "teacher"

    def __init__(self, config: TeacherConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        widths = config.stage_widths
        self.stem_conv = Conv2d(config.in_channels, widths[0], config.stem_kernel,
                                stride=config.stem_stride, rng=rng)
        self.stem_norm = LayerNorm2d(widths[0])

        rates = iter(config.drop_path_rates())
        for i, (depth, width) in enumerate(zip(config.stage_depths, widths)):
            if i > 0:
                setattr(self, f"down{i}", Sequential(
                    LayerNorm2d(widths[i - 1]),
                    Conv2d(widths[i - 1], width, 2, stride=2, rng=rng),
                ))
            blocks = [ConvNeXtBlock(width, config.expansion_ratio, config.block_kernel, next(rates), rng=rng)
                      for _ in range(depth)]
            setattr(self, f"stage{i}", Sequential(*blocks))

        self.head_drop = Dropout(config.head_dropout)
        self.head = Linear(widths[-1], config.num_classes, rng=rng)
        self.train()

    def features(self, x):
        h = self.stem_norm(self.stem_conv(x))
        for i in range(4):
            if i > 0:
                h = getattr(self, f"down{i}")(h)
            h = getattr(self, f"stage{i}")(h)
        return F.global_avg_pool(h)

    def forward(self, x):
        """Raw logits, no output activation."""
        return self.head(self.head_drop(self.features(x)))

    def block_drop_rates(self) -> list[float]:
        return [m.drop_path.p for m in self.modules() if isinstance(m, ConvNeXtBlock)]


def build_teacher(config: TeacherConfig | None = None) -> ConvNeXtTeacher:
    return ConvNeXtTeacher(config or TeacherConfig())
