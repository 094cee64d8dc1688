"""Allow ``python -m fbsweep`` as an alias for the ``fbsweep`` script."""

import sys

from fbsweep.cli import main

if __name__ == "__main__":
    sys.exit(main())
