"""Spawn entry point for worker daemons: `python -m elastikit.hostd_main`.

Kept separate from elastikit.hostd so runpy does not execute a second copy
of that module (the package __init__ already imports it).
"""

import sys

from .hostd import main

if __name__ == "__main__":
    sys.exit(main())
