"""Allow `python -m metashop` as an alias for the metashop script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
