from setuptools import setup

setup(
    name="retry-helper",
    version="1.0",
    packages=["retry_helper"],
)
