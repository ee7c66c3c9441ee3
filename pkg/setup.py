# Copyright © 2024 MoPD Lab Contributors.

import datetime
import os
import re
from pathlib import Path

from setuptools import setup


def get_version():
    source = Path("python/mopd/__init__.py").read_text()
    version = re.search(r'^__version__ = "([^"]+)"', source, re.M).group(1)
    if "PYPI_RELEASE" not in os.environ:
        version += datetime.date.today().strftime(".dev%Y%m%d")
    return version


long_description = (Path(__file__).parent / "README.md").read_text(encoding="utf-8")


if __name__ == "__main__":
    packages = [
        "mopd",
        "mopd.nn",
        "mopd.nn.layers",
        "mopd.optimizers",
    ]

    extras = {
        "dev": [
            "hypothesis",
            "pre-commit",
            "setuptools>=80",
            "torch",
        ],
    }
    entry_points = {
        "console_scripts": [
            "mopd = mopd.cli:main",
        ]
    }

    setup(
        name="mopd",
        version=get_version(),
        author="MoPD Lab Contributors",
        description="Mixture-of-prompts distillation for prompt learning on synthetic vision-language tasks.",
        long_description=long_description,
        long_description_content_type="text/markdown",
        license="MIT",
        include_package_data=True,
        package_dir={"": "python"},
        packages=packages,
        zip_safe=False,
        python_requires=">=3.9",
        install_requires=["numpy>=1.22", "scipy>=1.11"],
        extras_require=extras,
        entry_points=entry_points,
    )
