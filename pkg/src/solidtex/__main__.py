import sys

from solidtex.cli import main

sys.exit(main())
