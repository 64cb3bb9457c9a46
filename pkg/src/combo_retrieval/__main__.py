"""Main entry point when running as module."""

import sys

from combo_retrieval.main import main

if __name__ == "__main__":
    sys.exit(main())
