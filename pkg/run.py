#!/usr/bin/env python3
"""
Launcher for the SNARM command-line interface

    python run.py run --config config-desk.yaml --regime multi
"""

import os
import sys

# Add the project directory to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

if __name__ == "__main__":
    from snarm.cli import main

    sys.exit(main())
