from enum import Enum
from os import PathLike
from typing import TypeAlias

PathType: TypeAlias = str | PathLike[str]


class Split(str, Enum):
    train = 'train'
    valid = 'valid'
    test = 'test'


class ContrastiveType(str, Enum):
    none = 'none'
    cl = 'cl'
    kcl = 'kcl'
    kccl = 'kccl'


class BoundaryMode(str, Enum):
    adb = 'adb'
    adbes = 'adbes'


class RadiusParametrization(str, Enum):
    clamp = 'clamp'
    softplus = 'softplus'


class LRSchedulerType(str, Enum):
    constant = 'constant'
    linear = 'linear'
    cosine = 'cosine'
