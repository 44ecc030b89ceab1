import sys

from pimgpt.cli import main

sys.exit(main())
