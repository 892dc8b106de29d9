"""Seven-channel histopathology patch classifier built from scratch.

Library layout:

- :mod:`hres.tensor`    float tensors + reverse-mode autodiff ops
- :mod:`hres.imageproc` resize, color channels, Gaussian blur, CLAHE
- :mod:`hres.model`     residual network assembly and complexity summary
- :mod:`hres.train`     splits, RMSprop, early-stopped training loop
- :mod:`hres.metrics`   confusion matrix, per-class scores, ROC/AUROC
- :mod:`hres.gradcam`   class activation heatmaps and overlays
- :mod:`hres.dataio`    patch datasets, synthetic data, weights files
- :mod:`hres.cli`       batch command line: preprocess/train/eval/gradcam/summary
"""

__version__ = "0.1.0"
