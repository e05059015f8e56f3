import numpy as np
import pytest

from swpnet.datasynth import PreprocessConfig, generate_dataset
from swpnet.models import ModelConfig


def tiny_cls_config(num_classes=2, input_size=32, depth=18, width=1 / 16, head="plain_avgpool_fc"):
    return ModelConfig(depth_variant=depth, num_classes=num_classes,
                       width_multiplier=width, input_size=input_size, head=head)


def tiny_loc_config(input_size=32, depth=18, width=1 / 16):
    return ModelConfig(depth_variant=depth, num_classes=2, width_multiplier=width,
                       input_size=input_size, head="loc_head")


def tiny_preprocess(crop=32, eval_scale=36, scale_range=(0.70, 0.80), seed=0):
    return PreprocessConfig(crop_size=crop, eval_scale=eval_scale,
                            scale_range=scale_range, seed=seed)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two visually distinct classes on a 48px canvas, 6 images each."""
    root = tmp_path_factory.mktemp("tinyds")
    manifest = generate_dataset(2, 6, 48, root, seed=13, scale_range=(0.55, 0.65),
                                center_jitter=0.05, clutter=1)
    return manifest
