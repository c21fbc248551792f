import sys

from slideqc.cli import main

sys.exit(main())
