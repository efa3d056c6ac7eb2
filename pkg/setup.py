from typing import Dict

from setuptools import find_packages, setup

# version.py defines the VERSION and VERSION_SHORT variables.
# We use exec here so we don't import fastio.
VERSION: Dict[str, str] = {}
with open("fastio/version.py", "r") as version_file:
    exec(version_file.read(), VERSION)

# Use README.md as the long_description for the package
with open("README.md", "r") as readme_file:
    long_description = readme_file.read()

setup(
    name="fastio-sim",
    version=VERSION["VERSION"],
    description="A simulator of software-only device passthrough: opcode subtraction, "
    "privileged page tables and zero-copy guest switching",
    long_description_content_type="text/markdown",
    long_description=long_description,
    license="Apache License 2.0",
    classifiers=[
        "Intended Audience :: Science/Research",
        "Topic :: System :: Emulators",
        "Topic :: System :: Networking",
        "License :: OSI Approved :: Apache Software License",
        "Programming Language :: Python :: 3",
    ],
    packages=find_packages(exclude=["test", "test.*"]),
    include_package_data=True,
    install_requires=[
        "numpy>=1.16.5",
        "pandas>=1.0.0",
        "tqdm>=4.33.0,<5.0.0",
    ],
    entry_points={"console_scripts": ["fastio=fastio.cli:main"]},
    python_requires=">=3.6",
    keywords="hypervisor virtualization ept netmap zero-copy simulation",
)
