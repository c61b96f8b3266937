"""attnflare: attention-augmented convolutional solar-flare forecasting.

Library layout:

- :mod:`attnflare.tensor` - float32 tensors with reverse-mode autodiff
- :mod:`attnflare.models` - baseline (M1) and attention (M2) architectures
- :mod:`attnflare.data` - flare catalogs, labeling, partitions, imbalance
- :mod:`attnflare.synth` - planted-blob synthetic corpus generator
- :mod:`attnflare.train` - SGD training loop and checkpoints
- :mod:`attnflare.metrics` - TSS/HSS and stratified forecast verification
- :mod:`attnflare.interpret` - attention-map extraction and overlays
- :mod:`attnflare.cli` - `attnflare` command-line entry point
"""

__version__ = "0.1.0"
