import sys

from rotmaxcnn.cli import main

sys.exit(main())
