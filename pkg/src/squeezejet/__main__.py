#!/usr/bin/env python3
"""
SqueezeJet CLI Entry Point
"""

import sys

from squeezejet.main import main


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nShutting down SqueezeJet...")
        sys.exit(0)
