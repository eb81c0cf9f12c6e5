"""Deterministic tele-echography session simulator.

A master station steers a virtual probe, a slave station simulates a
strap-driven robot riding a breathing body phantom, and both talk over an
emulated bandwidth-partitioned link.  Everything runs on a virtual
microsecond clock, so identical inputs give byte-identical outputs.
"""

__version__ = "0.1.0"
