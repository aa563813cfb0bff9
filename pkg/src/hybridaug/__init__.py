"""Hybrid physics/ML models of dynamical systems with expert augmentation."""
__version__ = "0.1.0"
