"""Fine-grained population mapping from coarse grids, with one-shot transfer to a new city.

Everything runs on a small numpy autograd engine (``psrnet.autograd``).
"""

from .autograd import Adam, Tensor, backward, grad_check, no_grad
from .errors import (ConfigError, DataError, FormatError, NumericError, PsrError, ShapeError, StateError,
                     TrainError)
from .grid import PoiMap, PopulationSeries, ReferenceSnapshot, WindowSample, coarsen
from .metrics import MetricReport, bicubic_upsample, evaluate
from .stnet import STNet, StnetConfig, snet_forward, stnet_forward

__version__ = "0.1.0"
