"""
Page Modules package for the run viewer
Contains all page rendering modules
"""

from . import home
from . import training
from . import samples
from . import evaluation

__all__ = [
    'home',
    'training',
    'samples',
    'evaluation'
]
