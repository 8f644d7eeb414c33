import sys

from dualsearch.cli import main

sys.exit(main())
