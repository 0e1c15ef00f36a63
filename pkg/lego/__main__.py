"""Allow ``python -m lego``."""

from .cli import main

raise SystemExit(main())
