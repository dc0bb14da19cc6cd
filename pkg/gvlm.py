#!/usr/bin/env python3
"""
Command-line entry point: ``python gvlm.py <command> [options]``.
"""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
