import os
import sys

# Make helpers.py importable regardless of pytest's import mode.
sys.path.insert(0, os.path.dirname(__file__))
