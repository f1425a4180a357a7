from pathlib import Path
from setuptools import setup

readme_file = Path(__file__).parent / "README.md"
with readme_file.open("r") as f:
    text = f.read()

setup(
    name="EquilibriumLab",
    version="1.0.0",
    packages=["EquilibriumLab", "EquilibriumLab.lib"],
    license="GPLv3",
    description="Reversible fixed point solvers and exact memory efficient gradients for equilibrium layers",
    long_description=text,
    long_description_content_type="text/markdown",
    python_requires=">=3.8",
    entry_points={
        "console_scripts": [
            "EquilibriumLab = EquilibriumLab.equilibriumlab:main"
        ],
    },
    install_requires=[
        "numpy",
        "click",
        "rich"
    ],
    extras_require={
        "test": ["pytest", "hypothesis"]
    }
)
