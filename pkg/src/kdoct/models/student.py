"""Miniature EfficientNet-style student built from inverted-bottleneck blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..autodiff import functional as F
from ..errors import ShapeError
from .layers import Conv2d, DepthwiseConv2d, Dropout, Linear, Module, Sequential


@dataclass(frozen=True)
class StudentConfig:
    block_counts: tuple = (1, 2, 2)
    widths: tuple = (16, 24, 40)
    expansion_ratio: int = 4
    se_ratio: float = 0.25
    num_classes: int = 3
    in_channels: int = 3
    input_size: int = 32
    stem_width: int = 16
    stem_stride: int = 2
    stage_strides: tuple = (1, 2, 2)
    head_dropout: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        for name in ("block_counts", "widths", "stage_strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not (len(self.block_counts) == len(self.widths) == len(self.stage_strides)):
            raise ValueError("block_counts, widths and stage_strides must have equal length")
        if any(v < 1 for v in self.block_counts + self.widths + self.stage_strides):
            raise ValueError("block counts, widths and strides must be positive")
        if not 0.0 < self.se_ratio <= 1.0:
            raise ValueError(f"se_ratio must lie in (0, 1], got {self.se_ratio}")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ValueError("head_dropout must lie in [0, 1)")
        self.feature_sizes()

    def feature_sizes(self) -> list[int]:
        size = (self.input_size + 2 - 3) // self.stem_stride + 1
        sizes = [size]
        for stride in self.stage_strides:
            size = (size + 2 - 3) // stride + 1
            if size < 1:
                raise ShapeError(f"input size {self.input_size} is too small for the stage strides", axis=2)
            sizes.append(size)
        if sizes[0] < 1:
            raise ShapeError(f"input size {self.input_size} is too small for the stem", axis=2)
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("block_counts", "widths", "stage_strides"):
            d[name] = list(getattr(self, name))
        return d


class SqueezeExcite(Module):
    """Channel gate: pool -> reduce -> relu -> expand -> sigmoid."""

    def __init__(self, channels, reduced, *, rng):
        super().__init__()
        self.reduce = Linear(channels, reduced, rng=rng)
        self.expand = Linear(reduced, channels, rng=rng)

    def gate(self, x):
        s = F.relu(self.reduce(F.global_avg_pool(x)))
        return F.sigmoid(self.expand(s))

    def forward(self, x):
        g = self.gate(x)
        return F.mul(x, F.reshape(g, g.shape + (1, 1)))


class MBConv(Module):
    def __init__(self, cin, cout, stride, expansion, se_ratio, *, rng):
        super().__init__()
        hidden = cin * expansion
        self.expand = Conv2d(cin, hidden, 1, rng=rng) if expansion != 1 else None
        self.dwconv = DepthwiseConv2d(hidden, 3, stride=stride, padding=1, rng=rng)
        self.se = SqueezeExcite(hidden, max(1, int(cin * se_ratio)), rng=rng)
        self.project = Conv2d(hidden, cout, 1, rng=rng)
        self.use_residual = stride == 1 and cin == cout

    def forward(self, x):
        h = F.relu(self.expand(x)) if self.expand is not None else x
        h = F.relu(self.dwconv(h))
        h = self.se(h)
        h = self.project(h)
        return F.add(x, h) if self.use_residual else h


class EfficientStudent(Module):
    kind = "student"

    def __init__(self, config: StudentConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.stem_conv = Conv2d(config.in_channels, config.stem_width, 3,
                                stride=config.stem_stride, padding=1, rng=rng)
        cin = config.stem_width
        for i, (count, width, stride) in enumerate(zip(config.block_counts, config.widths, config.stage_strides)):
            blocks = []
            for j in range(count):
                blocks.append(MBConv(cin, width, stride if j == 0 else 1,
                                     config.expansion_ratio, config.se_ratio, rng=rng))
                cin = width
            setattr(self, f"stage{i}", Sequential(*blocks))
        self.head_drop = Dropout(config.head_dropout)
        self.head = Linear(cin, config.num_classes, rng=rng)
        self.train()

    def features(self, x):
        h = F.relu(self.stem_conv(x))
        for i in range(len(self.config.block_counts)):
            h = getattr(self, f"stage{i}")(h)
        return F.global_avg_pool(h)

    def forward(self, x):
        return self.head(self.head_drop(self.features(x)))


def build_student(config: StudentConfig | None = None) -> EfficientStudent:
    return EfficientStudent(config or StudentConfig())
