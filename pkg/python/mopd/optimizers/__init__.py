# Copyright © 2024 MoPD Lab Contributors.

from mopd.optimizers.optimizers import *
from mopd.optimizers.schedulers import *
