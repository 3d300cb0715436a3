import sys

from fedrul.cli import main

sys.exit(main())
