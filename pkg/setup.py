from setuptools import setup, find_packages

with open("PIP_Package.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="lisco",
    version="0.1.0",
    description="Learned iterative solver for parametric constrained optimization",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(include=['lisco', 'lisco.*']),
    include_package_data=True,
    install_requires=[
        "numpy",
        "scipy",
        "click",
        "tqdm",
        "pandas",
        "tabulate",
    ],
    extras_require={
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": [
            "lisco=lisco.cli:cli",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
)
