import sys

from patchlab.main import main

sys.exit(main())
