# tests/__init__.py
"""
Test suite for the DSIRP learning policies
"""
