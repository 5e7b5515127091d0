import sys

from metaspeaker.cli import main

sys.exit(main())
