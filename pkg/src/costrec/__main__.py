import sys

from costrec.cli import main

sys.exit(main())
