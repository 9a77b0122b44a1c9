from setuptools import setup, find_packages

setup(
    name="msfin-sr",
    version="1.0.0",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy",
        "scipy",
        "opencv-python-headless",
        "pandas",
        "plotly",
        "pydantic",
        "pydantic-settings",
        "python-dotenv",
        "prometheus_client",
        "threadpoolctl",
    ],
    extras_require={
        "test": ["pytest", "scikit-image"],
    },
    entry_points={
        "console_scripts": [
            "msfin=msfin.cli:main",
        ],
    },
)
