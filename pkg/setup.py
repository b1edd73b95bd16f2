#!/usr/bin/env python3
"""
Setup script for Crowd Hat.
"""

from setuptools import setup

# Read README for long description
with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

# Read requirements
with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="crowd-hat",
    version="1.0.0",
    author="Crowd Hat Contributors",
    description="Detector post-processing that learns per-region NMS thresholds and crowd counts "
                "from compressed detector outputs",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "core", "synth", "compress", "binary_protocol", "net", "nms", "metrics", "selection",
        "config", "pipeline", "cli", "tools", "server", "request_tools",
    ],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=3.0.0",
            "hypothesis>=6.0.0",
            "black>=22.0.0",
            "flake8>=4.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "crowd-hat=cli:main",
            "crowd-hat-server=server:main",
        ],
    },
    include_package_data=True,
    zip_safe=False,
)
