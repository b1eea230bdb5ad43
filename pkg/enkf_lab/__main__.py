import sys

from enkf_lab.cli import main

sys.exit(main())
