# Copyright © 2024 MoPD Lab Contributors.

__version__ = "0.1.0"

# The layers must load before anything importing mopd.backbone.
from mopd import utils
from mopd import errors
from mopd import numerics
from mopd import serialization
from mopd import nn
from mopd import optimizers
from mopd import backbone
from mopd import config
