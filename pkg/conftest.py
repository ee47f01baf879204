import os
import sys

# Tests import modules as ``src.<package>.<module>``.
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
