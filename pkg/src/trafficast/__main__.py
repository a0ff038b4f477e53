"""`python3 -m trafficast` entry point."""

import sys

from trafficast.cli import main

if __name__ == "__main__":
    sys.exit(main())
