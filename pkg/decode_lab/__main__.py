import sys

from decode_lab.cli import main

sys.exit(main())
