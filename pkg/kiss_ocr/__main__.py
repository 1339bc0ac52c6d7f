# pylint: disable=missing-module-docstring
import sys

from .cli import main

sys.exit(main())
