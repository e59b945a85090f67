"""PolarNet open-space segmentation of automotive radar range/azimuth maps, in numpy."""

__version__ = "0.1.0"
