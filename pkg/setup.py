#!/usr/bin/env python
# -*- encoding: utf-8 -*-

from glob import glob
from os.path import basename, splitext

from setuptools import find_packages, setup

setup(
    name="riconvnet",
    version="0.1.0",
    license="BSD-2-Clause",
    description="Rotation invariant convolutions for 3D point clouds",
    packages=find_packages(exclude=["tests", "tests.*"]),
    py_modules=[splitext(basename(path))[0] for path in glob("riconvnet/*.py")],
    package_data={"riconvnet": ["config/*.json"]},
    include_package_data=True,
    zip_safe=False,
    classifiers=[
        # complete classifier list:
        # http://pypi.python.org/pypi?%3Aaction=list_classifiers
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: BSD License",
        "Operating System :: Unix",
        "Operating System :: POSIX",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3 :: Only",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Programming Language :: Python :: Implementation :: CPython",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.10",
    install_requires=["numpy>=1.24", "trimesh>=4.0"],
    extras_require={"dev": ["pytest", "scipy"]},
    entry_points={
        "console_scripts": [
            "riconvnet = riconvnet.cli:main",
        ]
    },
)
