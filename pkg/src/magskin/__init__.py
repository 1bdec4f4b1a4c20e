"""magskin: magnetized-skin tactile sensing, simulated end to end.

A physics simulator for an elastomer skin with embedded magnetic
particles read by five magnetometers, a from-scratch MLP decoder
mapping flux deltas to contact location and force, triplet-loss
multi-sensor training with self-supervised adaptation to unseen
sensors, a binary wire protocol for flux frames, and an evaluation
harness with drift studies and report rendering.
"""

from . import (adapt, cli, config, datagen, drift, fieldsim, figures,
               metrics, neural, protocol)

__version__ = "0.1.0"

__all__ = ["adapt", "cli", "config", "datagen", "drift", "fieldsim",
           "figures", "metrics", "neural", "protocol", "__version__"]
