import sys

from segsweep.cli import main

sys.exit(main())
