"""Independent reference implementations used only by the tests.

They are deliberately slow per-pixel loops written from the geometric
definitions, sharing no code with ``batt.transforms``.
"""

import cmath
import math
import struct

import numpy as np


def rotate_oracle(image, angle, fill=0.0):
    """Per-pixel bilinear rotation using complex arithmetic for the coordinate map."""
    c, h, w = image.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    turn = cmath.exp(-1j * math.radians(angle))  # clockwise in a y-up frame
    out = np.empty((c, h, w), dtype=np.float64)
    for r in range(h):
        for col in range(w):
            z = complex(col - cx, -(r - cy)) * turn
            sx, sy = z.real + cx, -z.imag + cy
            # snap floating noise so quarter turns land on the grid
            if abs(sx - round(sx)) < 1e-9:
                sx = float(round(sx))
            if abs(sy - round(sy)) < 1e-9:
                sy = float(round(sy))
            if not (0 <= sy <= h - 1 and 0 <= sx <= w - 1):
                out[:, r, col] = fill
                continue
            out[:, r, col] = bilinear_at(image, sy, sx)
    return np.clip(out, 0, 1)


def bilinear_at(image, y, x):
    h, w = image.shape[-2:]
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    img = image.astype(np.float64)
    return (
        img[:, y0, x0] * (1 - fy) * (1 - fx)
        + img[:, y0, x1] * (1 - fy) * fx
        + img[:, y1, x0] * fy * (1 - fx)
        + img[:, y1, x1] * fy * fx
    )


def quarter_turn_oracle(image, quarter_turns):
    """Pure index permutation for counterclockwise quarter turns of a square image."""
    c, n, _ = image.shape
    out = np.empty_like(image)
    for r in range(n):
        for col in range(n):
            sr, sc = r, col
            for _ in range(quarter_turns % 4):
                # one CCW quarter turn: output (r, c) reads input (c, n-1-r)
                sr, sc = sc, n - 1 - sr
            out[:, r, col] = image[:, sr, sc]
    return out


def resize_oracle(image, out_h, out_w):
    c, h, w = image.shape
    out = np.empty((c, out_h, out_w))
    for r in range(out_h):
        for col in range(out_w):
            y = min(max((r + 0.5) * h / out_h - 0.5, 0), h - 1)
            x = min(max((col + 0.5) * w / out_w - 0.5, 0), w - 1)
            out[:, r, col] = bilinear_at(image, y, x)
    return out


def smooth_image(rng, shape=(1, 32, 32), min_wavelength=16.0, waves=3, amplitude=0.5):
    """Sum of plane waves with wavelength >= ``min_wavelength`` around mid-grey.

    The bilinear error of one resampling is at most A*k^2/8 for total
    amplitude A and wavenumber k, so two resamplings stay below
    0.5 * (2*pi/16)^2 / 4 ~= 0.0193.
    """
    c, h, w = shape
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    img = np.full(shape, 0.5)
    amps = rng.dirichlet(np.ones(waves)) * amplitude
    for ch in range(c):
        for a in amps:
            lam = rng.uniform(min_wavelength, 4 * min_wavelength)
            ang = rng.uniform(0, 2 * np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            k = 2 * np.pi / lam
            img[ch] += a * np.sin(k * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
    return np.clip(img, 0, 1).astype(np.float32)


def read_cifar_reference(path):
    """Record-by-record CIFAR-10 reader straight from the published layout."""
    images, labels = [], []
    with open(path, "rb") as fh:
        while True:
            rec = fh.read(3073)
            if not rec:
                break
            labels.append(rec[0])
            img = np.zeros((3, 32, 32), dtype=np.float32)
            for ch in range(3):
                for i in range(1024):
                    img[ch, i // 32, i % 32] = rec[1 + ch * 1024 + i] / 255.0
            images.append(img)
    return np.stack(images), np.array(labels)


def read_idx_reference(images_path, labels_path):
    with open(images_path, "rb") as fh:
        data = fh.read()
    magic, n, h, w = struct.unpack(">IIII", data[:16])
    assert magic == 2051
    imgs = np.array([[data[16 + i * h * w + j] / 255.0 for j in range(h * w)] for i in range(n)], dtype=np.float32)
    with open(labels_path, "rb") as fh:
        ldata = fh.read()
    assert struct.unpack(">I", ldata[:4])[0] == 2049
    return imgs.reshape(n, 1, h, w), np.frombuffer(ldata[8:], dtype=np.uint8)
