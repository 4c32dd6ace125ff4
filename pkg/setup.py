from setuptools import setup, find_packages

setup(
    name="noisy-transition-loss",
    version="1.0.0",
    description="Noisy-label training with an EM-estimated transition matrix and a constrained logit flow",
    packages=find_packages(exclude=["tests", "examples"]),
    install_requires=[
        "numpy>=1.24",
        "PyYAML>=6.0",
        "pydantic>=2.0",
        "scikit-learn>=1.2",
        "pandas>=1.5",
    ],
    extras_require={
        "test": ["pytest>=7.0.0", "hypothesis>=6.0"],
    },
    python_requires=">=3.8",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    entry_points={
        "console_scripts": [
            "transition-loss=src.cli:main",
        ],
    },
)
