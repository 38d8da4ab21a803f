import sys

from splatstream.cli import main

sys.exit(main())
