import sys

from dqjl.cli import main

sys.exit(main())
