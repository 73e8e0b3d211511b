"""One-shot scribble-supervised 3D organ segmentation at desk scale.

Modules: ``volgrid`` (volumes, phantoms, I/O), ``nn`` (tensor engine),
``prnet`` (self-supervised localization network), ``propagate`` (scribble
propagation and feature denoising), ``geos`` (geodesic pseudo masks),
``segment`` (segmenter training with label correction), ``pipeline`` and
``cli`` (experiments and command line).
"""

__version__ = "0.1.0"
