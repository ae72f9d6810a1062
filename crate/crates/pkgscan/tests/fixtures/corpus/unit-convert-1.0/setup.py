from setuptools import setup

setup(
    name="unit-convert",
    version="1.0",
    packages=["unit_convert"],
)
