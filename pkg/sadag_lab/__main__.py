"""Main entry point for the sadag_lab package."""

from .cli import cli

if __name__ == "__main__":
    cli()
