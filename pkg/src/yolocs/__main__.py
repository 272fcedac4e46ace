import sys

from yolocs.cli import main

sys.exit(main())
