import sys

from corona.cli import main

sys.exit(main())
