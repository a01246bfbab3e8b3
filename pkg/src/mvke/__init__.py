"""Multi-task user tagging with virtual-kernel experts.

Subpackages: ``diffgraph`` (tensor math with gradients), ``model``
(architecture), ``data`` (synthetic generator), ``train`` (optimizer and
loop), ``evaluation`` (AUC and analysis), ``serve`` (cached fast
prediction), ``cli`` (command line).
"""

__version__ = "0.1.0"
