"""Allow `python -m sitemb <subcommand> ...`."""

from .cli import main

main()
