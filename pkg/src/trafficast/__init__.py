"""Traffic forecasting with periodic attention and graph-convolutional GRUs.

A self-contained research artifact: a minimal float64 autodiff engine, a
periodic (recent/daily/weekly) data pipeline, the forecasting network with
its double-graph-convolution recurrent layer, and the training/experiment
harness that exercises them.
"""

from trafficast.tensor import Tensor, Tape, backward, finite_diff_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "finite_diff_check", "__version__"]
