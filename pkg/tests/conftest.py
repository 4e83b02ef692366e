import os
import sys

# make tests/helpers.py importable regardless of invocation directory
sys.path.insert(0, os.path.dirname(__file__))
