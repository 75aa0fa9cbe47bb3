import sys

from kwsembed.cli import main

sys.exit(main())
