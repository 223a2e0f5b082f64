"""Command-line entry point for the VarLab laboratory."""
from __future__ import annotations

import sys

from varlab.cli import main

if __name__ == "__main__":
    sys.exit(main())
