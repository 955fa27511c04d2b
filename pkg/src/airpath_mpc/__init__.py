"""Robust switched-LTI MPC toolkit for a diesel airpath, with offline
constraint tightening and a human-in-the-loop calibration workflow."""

__version__ = "0.1.0"
