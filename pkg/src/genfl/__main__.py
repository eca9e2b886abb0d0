import sys

from genfl.cli import main

sys.exit(main())
