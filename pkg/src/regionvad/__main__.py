import sys

from regionvad.cli import main

sys.exit(main())
