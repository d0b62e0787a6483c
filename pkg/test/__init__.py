"""
Test package for USTD.
"""
