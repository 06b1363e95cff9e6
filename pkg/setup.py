from setuptools import setup

setup(
    name="purearl",
    version="0.1.0",
    author="Adam Faulconbridge",
    author_email="afaulconbridge@googlemail.com",
    packages=["purearl"],
    package_data={"purearl": ["py.typed"]},
    description="Offline goal-conditioned hierarchical reinforcement learning in numpy.",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    url="https://github.com/sanogenetics/purearl",
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.22",
        "typing_extensions>=4.0",
    ],
    entry_points={
        "console_scripts": ["purearl=purearl.cli:main"],
    },
    extras_require={
        "dev": [
            "pytest",
            "pytest-cov",
            "hypothesis",
            "flake8",
            "black",
            "mypy",
            "pylint",
            "pip-tools",
            "pipdeptree",
            "pre-commit",
            "twine",
            "scalene",
        ],
    },
)
