"""Feature distillation on synthetic MOT sequences, desk scale.

The package provides a small float64 autodiff engine (`distmot.tensor`),
token/feature-map alignment and adapter heads (`distmot.align`), the
distillation losses (`distmot.losses`), synthetic teacher/student models
(`distmot.models`), MOT data ingestion and synthesis (`distmot.data`),
tracking metrics (`distmot.metrics`), and the training/ablation/tracking
driver (`distmot.experiment`) behind a `distmot` command line interface.
"""

__version__ = "0.1.0"
