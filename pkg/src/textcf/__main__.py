import sys

from textcf.cli import main

sys.exit(main())
