"""
Entry point for ``python -m durable_lab``; delegates to ``runner.cli()``.

Usage:
------
$ python -m durable_lab --help
"""

from .runner import cli

if __name__ == "__main__":
    cli()
