"""discord-tools-py."""

__all__ = ["run"]


def run(values):
    return sorted(values)
