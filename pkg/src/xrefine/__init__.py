"""Detector-agnostic sub-pixel refinement of keypoint matches."""
