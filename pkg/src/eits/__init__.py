"""Embodied exploration for perception self-improvement, desk scale.

An agent walks a voxelized room, fuses per-view semantic predictions into a
3D distribution map, and is rewarded for finding views its perception model
is unsure or inconsistent about.  Frames it flags get oracle labels and feed
a fine-tuning loop.  Everything runs on synthetic scenes with a synthetic
domain-shifted perceiver so the whole pipeline is checkable end to end.
"""

__version__ = "0.1.0"
