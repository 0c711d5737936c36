"""
cellscan

Malaria cell classification toolkit: from-scratch CNN, Canny preprocessing
and the experiment harness comparing raw and edge-map inputs.
"""

__version__ = "1.0.0"
__description__ = "Segmented blood-cell classifier with Canny edge preprocessing"
