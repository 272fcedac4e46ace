from yolocs.nn.blocks import C3, CBS, DCFS, SPPF, BlockDescriptor, Bottleneck, DCFSVariant
from yolocs.nn.heads import DEFAULT_ANCHORS, HeadADH, HeadConfig, HeadCoupled, HeadDH, task_permutation
from yolocs.nn.module import (
    BatchNorm2d,
    Concat,
    Conv2d,
    FlopCounter,
    MaxPool2d,
    Meta,
    Module,
    Sequential,
    SiLU,
    Upsample,
)

__all__ = [
    "BatchNorm2d", "BlockDescriptor", "Bottleneck", "C3", "CBS", "Concat", "Conv2d", "DCFS",
    "DCFSVariant", "DEFAULT_ANCHORS", "FlopCounter", "HeadADH", "HeadConfig", "HeadCoupled",
    "HeadDH", "MaxPool2d", "Meta", "Module", "SPPF", "Sequential", "SiLU", "Upsample",
    "task_permutation",
]
