from setuptools import setup

setup(
    name="json-pretty",
    version="1.0",
    packages=["json_pretty"],
)
