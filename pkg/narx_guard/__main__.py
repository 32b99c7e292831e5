"""Run the command-line harness with ``python -m narx_guard``."""

import sys

from .cli import main

sys.exit(main())
