# Copyright © 2024 MoPD Lab Contributors.

import sys

from mopd.cli import main

if __name__ == "__main__":
    sys.exit(main())
