"""Image loading: resize shortest side, center-crop, normalize."""

import numpy as np
from PIL import Image

# CLIP's standard normalization constants.
MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
STD = np.array([0.26862954, 0.26130258, 0.27577711])


def load_image_array(path, size: int) -> np.ndarray:
    """RGB float64 (size, size, 3): shortest side resized to `size`
    (bicubic), then center-cropped."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        w, h = img.size
        scale = size / min(w, h)
        img = img.resize((max(size, round(w * scale)), max(size, round(h * scale))),
                         Image.BICUBIC)
        w, h = img.size
        left = (w - size) // 2
        top = (h - size) // 2
        img = img.crop((left, top, left + size, top + size))
        pixels = np.asarray(img, dtype=np.float64) / 255.0
    return (pixels - MEAN) / STD
