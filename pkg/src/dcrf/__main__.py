import sys

from dcrf.cli import main

sys.exit(main())
