"""Entry point of ``python -m pydinn``."""

import sys

from pydinn.cli import main

sys.exit(main())
