import sys

from ggda.cli import main

sys.exit(main())
