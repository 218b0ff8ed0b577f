import sys

from gpudse.cli import main

sys.exit(main())
