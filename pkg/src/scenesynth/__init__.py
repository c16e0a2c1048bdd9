"""Two-tier semantic image synthesis: a style-modulated base generator renders
whole scenes from segmentation + instance-edge maps, and independently trained
class-specific generators refine individual objects via exact alpha-blended
composition."""

__version__ = "0.1.0"
