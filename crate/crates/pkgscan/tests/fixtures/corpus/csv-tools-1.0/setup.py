from setuptools import setup

setup(
    name="csv-tools",
    version="1.0",
    packages=["csv_tools"],
)
