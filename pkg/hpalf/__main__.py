"""Allow ``python -m hpalf``."""

import sys

from .cli import main

sys.exit(main())
