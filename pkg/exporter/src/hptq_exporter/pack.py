"""Image batches to calibration dataset containers.

Accepts a stacked .npy array or a directory of images (.npy/.png/.jpg).
Resizing and normalization are applied here and recorded in the container
manifest so the consumer never guesses preprocessing.
"""

import os

import numpy as np

from .container import write_dataset

NORMALIZERS = {
    "none": lambda x: x,
    "scale01": lambda x: x / 255.0,
    "pm1": lambda x: x / 127.5 - 1.0,
}


def _load_images(path, size=None):
    if os.path.isfile(path) and path.endswith(".npy"):
        arr = np.load(path)
        if arr.ndim == 3:
            arr = arr[..., None]
        if arr.ndim != 4:
            raise ValueError(f"{path}: expected an (n, h, w, c) array, got shape {arr.shape}")
        if size is not None and tuple(arr.shape[1:3]) != tuple(size):
            arr = np.stack([_resize(img, size) for img in arr])
        return arr.astype(np.float64)
    if os.path.isdir(path):
        from PIL import Image

        images = []
        for fname in sorted(os.listdir(path)):
            full = os.path.join(path, fname)
            if fname.endswith(".npy"):
                img = np.load(full)
            elif fname.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")):
                img = np.asarray(Image.open(full).convert("RGB"), dtype=np.float64)
            else:
                continue
            if img.ndim == 2:
                img = img[..., None]
            if size is not None and tuple(img.shape[:2]) != tuple(size):
                img = _resize(img, size)
            images.append(img.astype(np.float64))
        if not images:
            raise ValueError(f"{path}: no readable images")
        shapes = {img.shape for img in images}
        if len(shapes) != 1:
            raise ValueError(f"{path}: images disagree on shape ({sorted(shapes)}); pass --size")
        return np.stack(images)
    raise ValueError(f"{path}: expected a .npy file or an image directory")


def _resize(img, size):
    from PIL import Image

    mode_img = Image.fromarray(np.clip(img.squeeze(-1) if img.shape[-1] == 1 else img, 0, 255).astype(np.uint8))
    resized = np.asarray(mode_img.resize((size[1], size[0]), Image.BILINEAR), dtype=np.float64)
    if resized.ndim == 2:
        resized = resized[..., None]
    return resized


def pack_dataset(images, out_path, labels=None, n=None, normalize="none", size=None):
    """Write a calibration container; returns the number of samples packed."""
    if normalize not in NORMALIZERS:
        raise ValueError(f"unknown normalization {normalize!r} (expected {', '.join(NORMALIZERS)})")
    data = _load_images(images, size=size)
    label_arr = None
    if labels is not None:
        label_arr = np.load(labels) if isinstance(labels, str) else np.asarray(labels)
        if len(label_arr) < len(data):
            raise ValueError(f"{len(label_arr)} labels for {len(data)} images")
        label_arr = label_arr[: len(data)]
    if n is not None:
        data = data[:n]
        if label_arr is not None:
            label_arr = label_arr[:n]
        if len(data) < n:
            raise ValueError(f"requested {n} samples but only {len(data)} available")
    data = NORMALIZERS[normalize](data)
    meta = {"preprocessing": {"normalize": normalize, "resized_to": list(size) if size else None}}
    write_dataset(out_path, data, layout="hwc", labels=label_arr, meta=meta)
    return len(data)
