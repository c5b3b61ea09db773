"""Launcher script for the vp-distill command line."""

import sys

from src.__main__ import main

if __name__ == "__main__":
    sys.exit(main())
