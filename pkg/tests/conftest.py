import os

import numpy as np
import pytest

import data
from models import ModelConfig

TINY_SCALE = 0.0625


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_config():
    return ModelConfig(channel_scale=TINY_SCALE)


def square_sample(size=32, lo=8, hi=24):
    """Grey noise image and a white-square-on-black mask, uint8 (H, W, C)."""
    rng = np.random.default_rng(size)
    image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    mask = np.zeros((size, size, 1), dtype=np.uint8)
    mask[lo:hi, lo:hi] = 255
    return image, mask


def write_dataset(root, count=4, size=32, seed=0, manifest_name="train.txt"):
    """Random PPM images with square PGM masks plus a tab-separated manifest."""
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    lines = []
    for i in range(count):
        image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        mask = np.zeros((size, size, 1), dtype=np.uint8)
        a, b = sorted(rng.integers(0, size, size=2))
        mask[a:b + 1, a:b + 1] = 255
        data.write_image(data.ImageBuffer.from_array(image), os.path.join(root, "images", f"img{i}.ppm"))
        data.write_image(data.ImageBuffer.from_array(mask), os.path.join(root, "masks", f"img{i}.pgm"))
        lines.append(f"images/img{i}.ppm\tmasks/img{i}.pgm")
    path = os.path.join(root, manifest_name)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


@pytest.fixture
def dataset_dir(tmp_path):
    manifest = write_dataset(str(tmp_path), count=4, size=32)
    return tmp_path, manifest
