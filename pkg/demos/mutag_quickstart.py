"""Short MUTAG run: three folds, a few epochs each.

The full 10-fold protocol lives in the acceptance suite; this is the
five-minute version for poking at settings.
"""

import logging
from pathlib import Path

from cocn.graph import load_tu_dataset
from cocn.harness.training import TrainConfig, cross_validate
from cocn.model import ModelConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")

ds = load_tu_dataset(Path(__file__).resolve().parents[1] / "data" / "MUTAG")
mcfg = ModelConfig(heads=2, hidden=32, kernel_sizes=[5], smoothness_t=6, position_hidden=[16],
                   in_dim=ds.feature_dim, num_classes=ds.num_classes)
tcfg = TrainConfig(folds=3, max_epochs=20, early_stop_patience=10, batch_size=8)

report = cross_validate(ds, mcfg, tcfg)
print(f"mean accuracy {report.mean_accuracy:.3f} +- {report.std_accuracy:.3f}")
