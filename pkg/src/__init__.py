"""
IDProxy - Coarse-to-fine content proxies for cold-start items in a CTR ranker
"""

__version__ = "0.3.0"
__author__ = "IDProxy Contributors"
