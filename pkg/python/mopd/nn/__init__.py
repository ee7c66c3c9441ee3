# Copyright © 2024 MoPD Lab Contributors.

from mopd.nn import init
from mopd.nn.layers import *
from mopd.nn import losses
