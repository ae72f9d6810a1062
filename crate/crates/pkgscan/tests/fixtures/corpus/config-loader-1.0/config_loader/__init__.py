"""config-loader."""

__all__ = ["run"]


def run(values):
    return sorted(values)
