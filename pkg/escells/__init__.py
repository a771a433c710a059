# This file makes the escells directory a Python package
