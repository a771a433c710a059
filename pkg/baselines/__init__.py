# This file makes the baselines directory a Python package
