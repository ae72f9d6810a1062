from setuptools import setup

setup(
    name="textwrap-plus",
    version="1.0",
    packages=["textwrap_plus"],
)
