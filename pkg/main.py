#!/usr/bin/env python3
"""
Deferral Lab
Main entry point for the abstention and multi-expert deferral toolkit.
"""

import sys

from deferral.cli import main

if __name__ == "__main__":
    sys.exit(main())
