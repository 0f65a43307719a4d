import sys

from bevhead.cli import main

sys.exit(main())
