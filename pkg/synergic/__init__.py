"""
Synergic lung nodule analysis: joint classification / segmentation / regression
over sure and unsure data, CAM-SEM interpretability constraints and similar
nodule retrieval.
"""

import logging
import sys

import matplotlib

# Artifacts are rendered off-screen
matplotlib.use('Agg')

__version__ = '1.0.0'


def configure_logging(level='INFO'):
    """Install a single stderr handler on the package logger"""
    root = logging.getLogger('synergic')
    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(message)s'))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    return root
