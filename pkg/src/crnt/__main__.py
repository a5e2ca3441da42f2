import sys

from crnt.cli import main

sys.exit(main())
