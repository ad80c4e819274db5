import sys

from polyneuron.cli import main

sys.exit(main())
