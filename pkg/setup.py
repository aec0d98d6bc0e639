from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="Multiview-Mammo",
    version="1.0.0",
    description="Two-stage multi-view mammogram classification with per-view extractors and boosted trees",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    package_data={"mammo_multiview.config": ["default_config.json"]},
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "pandas>=2.0",
        "scikit-learn>=1.3",
        "opencv-python-headless>=4.8",
        "pypng>=0.20220715.0",
        "pydantic>=2.5",
    ],
    entry_points={
        "console_scripts": [
            "mammo-multiview=mammo_multiview.cli.main:main",
        ],
    },
)
