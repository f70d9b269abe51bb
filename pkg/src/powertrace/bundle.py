"""ModelBundle: everything needed to generate traces for one serving configuration.

Stored as a single JSON document.  Floats are written with ``repr`` precision so
``load_bundle(save_bundle(b))`` reproduces every number bit for bit.

Schema (``format_version`` 1)::

    {
      "format_version": 1,
      "config":     {"hardware", "model", "tensor_parallel", "is_moe"},
      "catalog":    {"K", "weights", "means", "stds", "phis", "y_min", "y_max"},
      "surrogate":  {"alpha0", "alpha1", "sigma_ttft", "mu_log_tbt", "sigma_log_tbt"},
      "classifier": {"input_dim", "hidden_size", "n_states", "feature_mean",
                     "feature_std", "tensors": {name: {"shape", "data"}}},
      "feature_norm": {"mean": [..], "std": [..]},
      "dt_s": 0.25,
      "batch_size": 64
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from powertrace.classifier import ClassifierModel
from powertrace.errors import BundleError, BundleVersionError
from powertrace.states import StateCatalog
from powertrace.types import ServingConfig
from powertrace.workload import LatencySurrogate

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelBundle:
    config: ServingConfig
    catalog: StateCatalog
    classifier: ClassifierModel
    surrogate: LatencySurrogate
    dt: float = 0.25
    batch_size: int = 64
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.catalog.K != self.classifier.n_states:
            raise BundleError(f"catalog has K={self.catalog.K} but the classifier emits {self.classifier.n_states} states")
        if np.any(self.classifier.feature_std <= 0):
            raise BundleError("feature normalization std must be positive")

    @property
    def feature_norm(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.classifier.feature_mean, self.classifier.feature_std

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": self.config.to_dict(),
            "catalog": self.catalog.to_dict(),
            "surrogate": self.surrogate.to_dict(),
            "classifier": self.classifier.to_dict(),
            "feature_norm": {"mean": self.classifier.feature_mean.tolist(),
                             "std": self.classifier.feature_std.tolist()},
            "dt_s": self.dt,
            "batch_size": self.batch_size,
        }


def bundle_from_dict(doc: dict) -> ModelBundle:
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise BundleError("bundle document has no format_version")
    version = doc["format_version"]
    if version != FORMAT_VERSION:
        raise BundleVersionError(f"bundle format_version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        classifier = ClassifierModel.from_dict(doc["classifier"])
        norm = doc.get("feature_norm")
        if norm is not None and (not np.array_equal(np.asarray(norm["mean"], float), classifier.feature_mean)
                                 or not np.array_equal(np.asarray(norm["std"], float), classifier.feature_std)):
            raise BundleError("feature_norm disagrees with the classifier's normalization")
        return ModelBundle(
            config=ServingConfig.from_dict(doc["config"]),
            catalog=StateCatalog.from_dict(doc["catalog"]),
            classifier=classifier,
            surrogate=LatencySurrogate.from_dict(doc["surrogate"]),
            dt=float(doc.get("dt_s", 0.25)),
            batch_size=int(doc.get("batch_size", 64)),
            format_version=version,
        )
    except BundleError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"corrupted bundle payload: {exc!r}") from None


def save_bundle(bundle: ModelBundle, path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    text = json.dumps(bundle.to_dict(), allow_nan=False, sort_keys=True)
    with open(path, "w") as fh:
        fh.write(text)


def load_bundle(path) -> ModelBundle:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise BundleError(f"{path}: cannot read bundle ({exc.strerror})") from None
    except ValueError as exc:
        raise BundleError(f"{path}: corrupted bundle ({exc})") from None
    return bundle_from_dict(doc)
