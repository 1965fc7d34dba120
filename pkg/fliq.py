#!/usr/bin/env python3
"""
Entry script for the FLI compression toolkit.
Usage: python fliq.py <gen|train|distill|quantize|eval|infer|export|sweep> [options]
"""

import sys
from pathlib import Path

# Add src to path
sys.path.append(str(Path(__file__).parent))

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
