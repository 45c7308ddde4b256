"""Toolkit for refining low-electron-dose liquid-cell TEM micrographs.

Subpackage map:

* ``micrograph`` -- image containers, PGM I/O, preprocessing, dose bookkeeping
* ``metrics``    -- SSIM / PSNR / L1 / L2 quality metrics
* ``nn``         -- numpy layers with hand-written backward passes, Adam
* ``unet``       -- encoder-decoder model, checkpoint serialization
* ``train``      -- synthetic paired data, training and evaluation loops
* ``stream``     -- simulated acquisition, ring-buffer integration, latency
* ``cellgeom``   -- liquid-cell thickness fits and scaling relations
* ``cli``        -- command-line entry point
"""

__version__ = "0.1.0"

from .errors import InputError, MetadataError, PgmError, ToolkitError, TrainingAbort

__all__ = [
    "InputError",
    "MetadataError",
    "PgmError",
    "ToolkitError",
    "TrainingAbort",
    "__version__",
]
