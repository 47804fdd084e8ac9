"""Module entry point for `python -m ddmm`; same as the `ddmm` console script."""

from __future__ import annotations

import sys

from .cli import main

if __name__ == "__main__":  # executed via `python -m ddmm`
    sys.exit(main())
