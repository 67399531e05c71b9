"""Desk-scale dense SLAM with monocular depth priors"""
__version__ = "1.0.0"
