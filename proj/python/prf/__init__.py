# Copyright (c) the prf project authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Forensics-guided image manipulation detection and localization."""

from ._core import (
    ConfigError,
    DataError,
    DivergenceError,
    Pipeline,
    extract_features,
    infer,
    load_image,
    make_authentic,
    mask_iou,
    perturb,
    perturbation_kinds,
    pixel_auc,
    pixel_f1,
    save_image,
    synthesize,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "Pipeline",
    "extract_features",
    "infer",
    "load_image",
    "make_authentic",
    "mask_iou",
    "perturb",
    "perturbation_kinds",
    "pixel_auc",
    "pixel_f1",
    "save_image",
    "synthesize",
    "train",
]
