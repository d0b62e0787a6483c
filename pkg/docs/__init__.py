"""
Documentation package for USTD.
"""
