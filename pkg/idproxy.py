"""
IDProxy - Main Application Entry Point
Content proxies for cold-start items in a click-through-rate ranker
"""
import sys
import os

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from cli import main

if __name__ == "__main__":
    sys.exit(main())
